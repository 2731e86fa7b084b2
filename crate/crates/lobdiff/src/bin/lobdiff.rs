fn main() {
    std::process::exit(lobdiff::cli::run());
}
