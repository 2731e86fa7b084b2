//! Command-line pipeline wiring every module together.
//!
//! One TOML configuration file drives all commands; `--set key=value`
//! flags patch individual entries. Subcommands: `ingest` validates data,
//! `synth` and `baseline` produce book streams, `train` fits the
//! denoiser, `sample` generates futures conditioned on a history,
//! `evaluate` compares real and generated streams, and `ablate` sweeps
//! sampling step counts. Exit codes: 0 success, 1 usage error, 2
//! data/validation error, 3 numeric failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::{s, Array3};

use crate::baseline::{self, BaselineError, ContParams};
use crate::book::{self, BookState, IngestError, LevelQuote, WindowMode};
use crate::codec::{self, CodecError, DecodeReport, LobImage, NormSpec, RowProvenance};
use crate::config::{ConfigError, RunConfig};
use crate::diffusion::{DiffusionError, DiffusionSchedule};
use crate::metrics::{self, MetricError, MetricReport};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::train::{TrainError, TrainOptions, Trainer};
use crate::synth::{gen_stream, SynthError, SynthRegime};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            DiffusionError::BadSchedule(_) | DiffusionError::BadSubSchedule(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Diffusion(d) => d.into(),
            TrainError::Model(m) => CliError::Usage(m.to_string()),
            TrainError::NoData => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "lobdiff",
    version,
    about = "Order-book futures by diffusion inpainting: ingest, train, sample, evaluate."
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr=0.01 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an orderbook CSV and print a summary.
    Ingest {
        /// Orderbook CSV to check.
        #[arg(long)]
        input: PathBuf,
        /// Companion timestamp file.
        #[arg(long)]
        times: Option<PathBuf>,
        /// Also write the summary to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic book stream as orderbook CSV.
    Synth {
        /// Regime: constant, walk, large_tick, or small_tick.
        #[arg(long)]
        regime: String,
        /// Number of states.
        #[arg(long)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
        /// Levels per side; data.levels when omitted.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate the zero-intelligence baseline to orderbook CSV.
    Baseline {
        /// Number of events.
        #[arg(long)]
        events: usize,
        #[arg(long)]
        out: PathBuf,
        /// Calibrate parameters from this stream first, then simulate.
        #[arg(long)]
        calibrate_from: Option<PathBuf>,
    },
    /// Train the inpainting denoiser; writes checkpoint + loss trace.
    Train {
        /// Training orderbook CSV; data.orderbook when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; `<out>.loss.csv` when omitted.
        #[arg(long)]
        loss_trace: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample futures conditioned on the tail of a history CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// History orderbook CSV (last history_len states condition).
        #[arg(long)]
        history: PathBuf,
        /// Output directory for sample CSVs and the manifest.
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of futures; sample.count when omitted.
        #[arg(long)]
        count: Option<usize>,
        /// Reverse-process steps; sample.steps when omitted.
        #[arg(long)]
        steps: Option<usize>,
        /// Base seed; sample.seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare generated streams against a real stream.
    Evaluate {
        /// Real orderbook CSV.
        #[arg(long)]
        real: PathBuf,
        /// Generated CSV files or directories of them.
        #[arg(long, num_args = 1.., required = true)]
        gen: Vec<PathBuf>,
        /// Output directory for report and histogram files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sweep sampling step counts: sample + evaluate per entry.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        history: PathBuf,
        /// Real orderbook CSV to compare against.
        #[arg(long)]
        real: PathBuf,
        /// Output table CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated step counts; ablate.steps when omitted.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("usage error: {e}");
            return 1;
        }
    };
    let hash = cfg.hash();
    let result = match cli.command {
        Command::Ingest { input, times, out } => cmd_ingest(&cfg, &hash, &input, times.as_deref(), out.as_deref()),
        Command::Synth { regime, length, out, levels, seed } => {
            cmd_synth(&cfg, &hash, &regime, length, &out, levels, seed)
        }
        Command::Baseline { events, out, calibrate_from } => {
            cmd_baseline(&cfg, &hash, events, &out, calibrate_from.as_deref())
        }
        Command::Train { data, out, loss_trace, resume } => {
            cmd_train(&cfg, &hash, data.as_deref(), &out, loss_trace.as_deref(), resume.as_deref())
        }
        Command::Sample { checkpoint, history, out_dir, count, steps, seed } => {
            cmd_sample(&cfg, &hash, &checkpoint, &history, &out_dir, count, steps, seed)
        }
        Command::Evaluate { real, gen, out_dir } => cmd_evaluate(&cfg, &hash, &real, &gen, &out_dir),
        Command::Ablate { checkpoint, history, real, out, steps } => {
            cmd_ablate(&cfg, &hash, &checkpoint, &history, &real, &out, steps)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Loads an orderbook CSV. The configured companion timestamp file and
/// the trading-hours restriction only make sense for the configured
/// data file itself, so they apply when `path` is that file; generated
/// or ad-hoc files parse with row-index timestamps.
fn load_states(cfg: &RunConfig, path: &Path) -> Result<Vec<BookState>, CliError> {
    let is_primary = !cfg.data.orderbook.is_empty() && same_file(path, Path::new(&cfg.data.orderbook));
    let states = match (&cfg.data.times, is_primary) {
        (Some(t), true) => book::parse_orderbook_file_with_times(path, Path::new(t), cfg.data.levels)?,
        _ => book::parse_orderbook_file(path, cfg.data.levels)?,
    };
    if cfg.data.restrict_hours && is_primary {
        Ok(book::restrict_trading_hours(&states, cfg.data.open, cfg.data.close))
    } else {
        Ok(states)
    }
}

fn create_parent_dirs(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn cmd_ingest(
    cfg: &RunConfig,
    hash: &str,
    input: &Path,
    times: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let report = book::scan_orderbook_file(input, cfg.data.levels)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "config_hash = {hash}");
    let _ = writeln!(summary, "file = {}", input.display());
    let _ = writeln!(summary, "levels = {}", cfg.data.levels);
    let _ = writeln!(summary, "rows_read = {}", report.rows_read);
    let _ = writeln!(summary, "states_parsed = {}", report.states.len());
    let _ = writeln!(summary, "violations = {}", report.violations.len());
    for (row, reason) in report.violations.iter().take(50) {
        let _ = writeln!(summary, "violation.row_{row} = {reason}");
    }
    if report.violations.len() > 50 {
        let _ = writeln!(summary, "violations_truncated = {}", report.violations.len() - 50);
    }
    if let Some(times_path) = times {
        let times = book::read_times_file(times_path)?;
        let _ = writeln!(summary, "times_rows = {}", times.len());
        if times.len() != report.rows_read {
            let _ = writeln!(summary, "times_mismatch = expected {} rows", report.rows_read);
        } else {
            let in_hours =
                times.iter().filter(|&&t| t >= cfg.data.open && t < cfg.data.close).count();
            let _ = writeln!(
                summary,
                "in_trading_hours = {} of {} ({} .. {})",
                in_hours,
                times.len(),
                cfg.data.open,
                cfg.data.close
            );
        }
    }
    print!("{summary}");
    if let Some(out) = out {
        create_parent_dirs(out)?;
        std::fs::write(out, &summary)?;
    }
    Ok(())
}

/// Writes states as orderbook CSV with provenance comment lines on top.
fn write_states_csv(path: &Path, states: &[BookState], comments: &[(&str, String)]) -> Result<(), CliError> {
    create_parent_dirs(path)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (key, value) in comments {
        writeln!(w, "# {key}={value}")?;
    }
    book::write_orderbook(&mut w, states)?;
    w.flush()?;
    Ok(())
}

/// Companion timestamp file path for a CSV written by this tool.
fn times_companion(path: &Path) -> PathBuf {
    path.with_extension("times.csv")
}

/// Writes one timestamp per book row next to the orderbook CSV, since
/// the orderbook format itself carries no time column.
fn write_times_csv(path: &Path, states: &[BookState], hash: &str) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# config_hash={hash}")?;
    for s in states {
        writeln!(w, "{}", s.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(
    cfg: &RunConfig,
    hash: &str,
    regime: &str,
    length: usize,
    out: &Path,
    levels: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let regime: SynthRegime = regime.parse().map_err(|e: SynthError| CliError::Usage(e.to_string()))?;
    let levels = levels.unwrap_or(cfg.data.levels);
    let seed = seed.unwrap_or(cfg.train.seed);
    let states = gen_stream(regime, length, levels, seed)?;
    write_states_csv(
        out,
        &states,
        &[
            ("config_hash", hash.to_string()),
            ("generator", format!("synth regime={regime:?} levels={levels} seed={seed}")),
        ],
    )?;
    write_times_csv(&times_companion(out), &states, hash)?;
    println!("wrote {} states to {}", states.len(), out.display());
    Ok(())
}

fn cmd_baseline(
    cfg: &RunConfig,
    hash: &str,
    events: usize,
    out: &Path,
    calibrate_from: Option<&Path>,
) -> Result<(), CliError> {
    let b = &cfg.baseline;
    let n = cfg.data.levels;
    let params = match calibrate_from {
        Some(path) => {
            // Prefer the sibling timestamp file this tool writes: the
            // fitted rates are per unit of whatever clock the states
            // carry, and row indices are a poor clock.
            let companion = times_companion(path);
            let states = if companion.is_file() {
                book::parse_orderbook_file_with_times(path, &companion, cfg.data.levels)?
            } else {
                load_states(cfg, path)?
            };
            let mut fitted = baseline::calibrate(&states)?;
            fitted.seed = b.seed;
            println!(
                "calibrated from {}: limit rates {:?}, market {:.6}, cancel {:.6}, order size {}",
                path.display(),
                fitted.bid_limit_rates,
                fitted.market_rate,
                fitted.cancel_rate,
                fitted.order_size
            );
            fitted
        }
        None => ContParams::power_law(b.k, b.gamma, b.market_rate, b.cancel_rate, b.order_size, n, b.seed),
    };
    let bids = (0..n).map(|l| LevelQuote::new(b.init_mid - 1 - l as i64, b.init_depth)).collect();
    let asks = (0..n).map(|l| LevelQuote::new(b.init_mid + 1 + l as i64, b.init_depth)).collect();
    let init = BookState::new(0.0, asks, bids);
    let sim = baseline::simulate(&params, &init, events)?;
    write_states_csv(
        out,
        &sim.states,
        &[
            ("config_hash", hash.to_string()),
            ("generator", format!("baseline events={events} seed={}", params.seed)),
            ("emitted", sim.emitted().to_string()),
        ],
    )?;
    write_times_csv(&times_companion(out), &sim.states, hash)?;
    if sim.halted_early {
        println!(
            "halted early: one side depleted after {} of {} events; wrote {}",
            sim.emitted(),
            events,
            out.display()
        );
    } else {
        println!("wrote {} states to {}", sim.emitted(), out.display());
    }
    Ok(())
}

/// Encodes consecutive windows into normalized padded squares paired
/// with the history length, the training set format.
fn build_training_squares(
    cfg: &RunConfig,
    states: &[BookState],
) -> Result<Vec<(Array3<f64>, usize)>, CliError> {
    let spec = cfg.window_spec()?;
    // Training windows have a real future, so the clip band covers the
    // whole window; restricting it to history flattens drifted futures
    // against the band edge and teaches the model broken ladders.
    let norm_spec = NormSpec {
        history_len: cfg.window.history_len,
        rolling_window: cfg.norm.rolling_window,
        stat_cols: None,
    };
    let mut out = Vec::new();
    for window in book::iterate_windows(states, &spec, WindowMode::Train) {
        let img = codec::encode_window(window, cfg.data.levels)?;
        let normed = codec::normalize(&img, &norm_spec)?;
        let (square, _) = codec::pad_to_square(&normed)?;
        out.push((square, cfg.window.history_len));
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "{} states cannot fill one window of {}",
            states.len(),
            spec.total_len()
        )));
    }
    Ok(out)
}

fn cmd_train(
    cfg: &RunConfig,
    hash: &str,
    data: Option<&Path>,
    out: &Path,
    loss_trace: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None if !cfg.data.orderbook.is_empty() => PathBuf::from(&cfg.data.orderbook),
        None => return Err(CliError::Usage("no training data: pass --data or set data.orderbook".into())),
    };
    let states = load_states(cfg, &data_path)?;
    let squares = build_training_squares(cfg, &states)?;
    let (mut trainer, sched) = match resume {
        Some(ckpt) => {
            let (trainer, sched, _) = checkpoint::load_file(ckpt)?;
            (trainer, sched)
        }
        None => {
            let unet_cfg = cfg.unet_config()?;
            let trainer = Trainer::new(unet_cfg, cfg.train.lr, cfg.train.seed).map_err(CliError::from)?;
            (trainer, cfg.schedule()?)
        }
    };
    let opts = TrainOptions {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        future_only: cfg.train.future_only,
    };
    let mut trace: Vec<(u64, f64)> = Vec::new();
    trainer.train(&sched, &squares, &opts, |step, loss| trace.push((step, loss)))?;
    create_parent_dirs(out)?;
    checkpoint::save_file(out, &mut trainer, &sched, hash)?;
    let trace_path = match loss_trace {
        Some(p) => p.to_path_buf(),
        None => out.with_extension("loss.csv"),
    };
    create_parent_dirs(&trace_path)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "step,loss")?;
    for (step, loss) in &trace {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()?;
    let last = trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} windows; final loss {:.6}; checkpoint {}",
        trace.len(),
        squares.len(),
        last,
        out.display()
    );
    Ok(())
}

/// Everything needed to sample futures for one history tail.
struct SampleSetup {
    trainer: Trainer,
    sched: DiffusionSchedule,
    checkpoint_meta: String,
    history: Vec<BookState>,
    square: Array3<f64>,
    normed: codec::LobImage,
    prov: RowProvenance,
}

fn prepare_sampling(cfg: &RunConfig, ckpt: &Path, history_path: &Path) -> Result<SampleSetup, CliError> {
    let (trainer, sched, checkpoint_meta) = checkpoint::load_file(ckpt)?;
    let h = cfg.window.history_len;
    let p = cfg.window.pred_len;
    let side = h + p;
    if trainer.net.cfg.resolution != side {
        return Err(CliError::Usage(format!(
            "window history_len + pred_len = {side} but the checkpoint works on {0}x{0} images",
            trainer.net.cfg.resolution
        )));
    }
    let states = load_states(cfg, history_path)?;
    if states.len() < h {
        return Err(CliError::Data(format!("history has {} states, need at least {h}", states.len())));
    }
    let history: Vec<BookState> = states[states.len() - h..].to_vec();
    // Placeholder future states keep the window rectangular; their
    // content is masked out of the model input and replaced by sampling.
    let dt = if history.len() > 1 {
        let span = history.last().unwrap().timestamp - history[0].timestamp;
        let mean = span / (history.len() - 1) as f64;
        if mean > 0.0 { mean } else { 1.0 }
    } else {
        1.0
    };
    let last = history.last().unwrap();
    let mut window = history.clone();
    for i in 0..p {
        let mut filler = last.clone();
        filler.timestamp = last.timestamp + dt * (i + 1) as f64;
        window.push(filler);
    }
    let img = codec::encode_window(&window, cfg.data.levels)?;
    let norm_spec = NormSpec {
        history_len: h,
        rolling_window: cfg.norm.rolling_window,
        stat_cols: Some(h),
    };
    let normed = codec::normalize(&img, &norm_spec)?;
    let (square, prov) = codec::pad_to_square(&normed)?;
    Ok(SampleSetup { trainer, sched, checkpoint_meta, history, square, normed, prov })
}

/// One decoded future stream plus its repair accounting.
struct GeneratedStream {
    seed: u64,
    states: Vec<BookState>,
    report: DecodeReport,
}

/// Samples `seeds.len()` futures and decodes them back to book states;
/// history states are restored verbatim. Returns the streams and the
/// wall-clock seconds spent inside the reverse process.
fn run_sampling(
    cfg: &RunConfig,
    setup: &SampleSetup,
    steps: usize,
    seeds: &[u64],
) -> Result<(Vec<GeneratedStream>, f64), CliError> {
    let h = cfg.window.history_len;
    let clock = Instant::now();
    let squares = crate::diffusion::sample_inpaint_batch(
        &setup.trainer.net,
        &setup.sched,
        &setup.square,
        h,
        steps,
        seeds,
    )?;
    let wall = clock.elapsed().as_secs_f64();
    let mut streams = Vec::with_capacity(squares.len());
    for (square, &seed) in squares.iter().zip(seeds) {
        let (prices, sizes) = codec::unpad(square, &setup.prov)?;
        let image = setup.normed.like(prices, sizes)?;
        let raw = codec::denormalize(&image)?;
        // Only the future region is generated content; the history is
        // restored verbatim from the input, so the repair report covers
        // the generated columns alone.
        let future = LobImage::from_grids(
            raw.prices.slice(s![.., h..]).to_owned(),
            raw.sizes.slice(s![.., h..]).to_owned(),
            raw.timestamps[h..].to_vec(),
            raw.levels,
        )?;
        let outcome = codec::decode_image(&future)?;
        let mut states = setup.history.clone();
        states.extend(outcome.states);
        streams.push(GeneratedStream { seed, states, report: outcome.report });
    }
    Ok((streams, wall))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    cfg: &RunConfig,
    hash: &str,
    ckpt: &Path,
    history: &Path,
    out_dir: &Path,
    count: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let setup = prepare_sampling(cfg, ckpt, history)?;
    let count = count.unwrap_or(cfg.sample.count).max(1);
    let steps = steps.unwrap_or(cfg.sample.steps);
    let base_seed = seed.unwrap_or(cfg.sample.seed);
    let seeds: Vec<u64> = (0..count as u64).map(|b| base_seed.wrapping_add(b)).collect();
    let (streams, wall) = run_sampling(cfg, &setup, steps, &seeds)?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest_files = Vec::new();
    for (b, stream) in streams.iter().enumerate() {
        let name = format!("sample_{b:02}.csv");
        let path = out_dir.join(&name);
        write_states_csv(
            &path,
            &stream.states,
            &[
                ("config_hash", hash.to_string()),
                ("seed", stream.seed.to_string()),
                ("steps", steps.to_string()),
            ],
        )?;
        let r = &stream.report;
        manifest_files.push(serde_json::json!({
            "file": name,
            "seed": stream.seed,
            "columns": r.columns,
            "repaired_columns": r.repaired_columns,
            "repair_rate": r.repair_rate(),
            "resorted": r.resorted,
            "merged": r.merged,
            "clamped_sizes": r.clamped_sizes,
            "uncrossed_drops": r.uncrossed_drops,
            "compacted": r.compacted,
        }));
    }
    let manifest = serde_json::json!({
        "config_hash": hash,
        "checkpoint_meta": setup.checkpoint_meta,
        "steps": steps,
        "count": count,
        "seeds": seeds,
        "history_len": cfg.window.history_len,
        "pred_len": cfg.window.pred_len,
        "levels": cfg.data.levels,
        "sampling_seconds": wall,
        "files": manifest_files,
    });
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    println!(
        "wrote {count} samples ({steps} steps, {:.2}s sampling) to {}",
        wall,
        out_dir.display()
    );
    Ok(())
}

/// Expands files or directories into a sorted list of CSV paths.
fn expand_gen_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut inside: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            inside.sort();
            if inside.is_empty() {
                return Err(CliError::Data(format!("{} contains no CSV files", path.display())));
            }
            files.extend(inside);
        } else {
            files.push(path.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no generated files given".into()));
    }
    Ok(files)
}

fn write_report_files(
    out_dir: &Path,
    hash: &str,
    report: &MetricReport,
    real_series: &[metrics::ScoreSeries],
    gen_series: &[metrics::ScoreSeries],
    bins: usize,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    // Key-value document.
    let mut doc = String::new();
    let _ = writeln!(doc, "config_hash = {hash}");
    for m in &report.metrics {
        let _ = writeln!(doc, "{}.l1 = {}", m.name, m.l1);
        let _ = writeln!(doc, "{}.l1_ci = [{}, {}]", m.name, m.l1_ci.0, m.l1_ci.1);
        let _ = writeln!(doc, "{}.wasserstein = {}", m.name, m.wasserstein);
        let _ = writeln!(doc, "{}.wasserstein_ci = [{}, {}]", m.name, m.wasserstein_ci.0, m.wasserstein_ci.1);
        let _ = writeln!(doc, "{}.n_real = {}", m.name, m.n_real);
        let _ = writeln!(doc, "{}.n_gen = {}", m.name, m.n_gen);
    }
    for f in &report.failures {
        let _ = writeln!(doc, "failure.{} = {}", f.name, f.reason);
    }
    let _ = writeln!(doc, "mean_l1 = {}", report.mean_l1);
    let _ = writeln!(doc, "mean_wasserstein = {}", report.mean_wasserstein);
    std::fs::write(out_dir.join("report.txt"), &doc)?;
    // Flat CSV.
    let mut flat = Vec::new();
    writeln!(flat, "# config_hash={hash}")?;
    metrics::write_report_csv(&mut flat, report)?;
    std::fs::write(out_dir.join("report.csv"), &flat)?;
    // Plot-ready histograms per metric that succeeded on both sides;
    // pair by name since either side may be missing a failed metric.
    for r in real_series {
        let Some(g) = gen_series.iter().find(|g| g.name == r.name) else { continue };
        if r.values.is_empty() || g.values.is_empty() {
            continue;
        }
        let mut buf = Vec::new();
        writeln!(buf, "# config_hash={hash}")?;
        metrics::write_histogram_csv(&mut buf, &r.name, &r.values, &g.values, bins)?;
        std::fs::write(out_dir.join(format!("hist_{}.csv", r.name)), &buf)?;
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, hash: &str, real: &Path, gen: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    let real_states = load_states(cfg, real)?;
    let files = expand_gen_paths(gen)?;
    let mut segments = Vec::with_capacity(files.len());
    for f in &files {
        segments.push(load_states(cfg, f)?);
    }
    let eval_cfg = cfg.eval_config();
    let report = metrics::evaluate_segments(&real_states, &segments, &eval_cfg)?;
    let real_series: Vec<_> = metrics::compute_series(&real_states, &eval_cfg)
        .into_iter()
        .filter_map(Result::ok)
        .collect();
    let gen_series: Vec<_> = metrics::pool_series(&segments, &eval_cfg).into_iter().filter_map(Result::ok).collect();
    write_report_files(out_dir, hash, &report, &real_series, &gen_series, eval_cfg.bins)?;
    for m in &report.metrics {
        println!("{}: l1 {:.4}  w1 {:.4}", m.name, m.l1, m.wasserstein);
    }
    for f in &report.failures {
        println!("{} failed: {}", f.name, f.reason);
    }
    println!("mean_l1 {:.4}  mean_wasserstein {:.4}  -> {}", report.mean_l1, report.mean_wasserstein, out_dir.display());
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    hash: &str,
    ckpt: &Path,
    history: &Path,
    real: &Path,
    out: &Path,
    steps: Option<Vec<usize>>,
) -> Result<(), CliError> {
    let steps_list = steps.unwrap_or_else(|| cfg.ablate.steps.clone());
    if steps_list.is_empty() {
        return Err(CliError::Usage("ablation needs at least one steps value".into()));
    }
    let setup = prepare_sampling(cfg, ckpt, history)?;
    let real_states = load_states(cfg, real)?;
    let eval_cfg = cfg.eval_config();
    let h = cfg.window.history_len;
    let seeds: Vec<u64> = (0..cfg.sample.count.max(1) as u64).map(|b| cfg.sample.seed.wrapping_add(b)).collect();
    let mut rows = Vec::new();
    for &steps in &steps_list {
        let (streams, wall) = run_sampling(cfg, &setup, steps, &seeds)?;
        // Only generated futures count; the verbatim history is real data.
        let segments: Vec<Vec<BookState>> = streams.iter().map(|s| s.states[h..].to_vec()).collect();
        let report = metrics::evaluate_segments(&real_states, &segments, &eval_cfg)?;
        for m in &report.metrics {
            rows.push(format!("{steps},{},l1,{},{},{}", m.name, m.l1, m.l1_ci.0, m.l1_ci.1));
            rows.push(format!(
                "{steps},{},wasserstein,{},{},{}",
                m.name, m.wasserstein, m.wasserstein_ci.0, m.wasserstein_ci.1
            ));
        }
        rows.push(format!("{steps},summary,mean_l1,{},,", report.mean_l1));
        rows.push(format!("{steps},summary,mean_wasserstein,{},,", report.mean_wasserstein));
        rows.push(format!("{steps},wall_clock,seconds,{wall},,"));
        println!(
            "steps {steps}: mean_l1 {:.4}  mean_wasserstein {:.4}  sampling {:.2}s",
            report.mean_l1, report.mean_wasserstein, wall
        );
    }
    create_parent_dirs(out)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "steps,metric,loss_type,value,ci_low,ci_high")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    println!("wrote ablation table to {}", out.display());
    Ok(())
}
