//! End-to-end tests of the command-line binary: every subcommand runs
//! against small synthetic inputs in a temp directory, and exit codes
//! follow the documented contract (0 ok, 1 usage, 2 data, 3 numeric).

use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lobdiff"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_ingest_reports_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    let (code, _, err) =
        run(&["synth", "--regime", "walk", "--length", "150", "--out", path_str(&data), "--seed", "3"]);
    assert_eq!(code, 0, "synth failed: {err}");
    assert!(data.is_file());
    // A timestamp companion rides along.
    assert!(dir.path().join("walk.times.csv").is_file());

    let (code, out, _) = run(&["ingest", "--input", path_str(&data)]);
    assert_eq!(code, 0);
    assert!(out.contains("rows_read = 150"), "{out}");
    assert!(out.contains("states_parsed = 150"), "{out}");
    assert!(out.contains("violations = 0"), "{out}");
    assert!(out.contains("config_hash = "), "{out}");
}

#[test]
fn ingest_flags_crossed_rows_but_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("crossed.csv");
    // Second row crossed: best ask 100 <= best bid 101.
    std::fs::write(
        &data,
        "105,5,104,7,106,4,103,3\n100,5,101,7,106,4,99,3\n105,5,104,7,106,4,103,3\n",
    )
    .unwrap();
    let (code, out, _) =
        run(&["--set", "data.levels=2", "ingest", "--input", path_str(&data)]);
    assert_eq!(code, 0);
    assert!(out.contains("violations = 1"), "{out}");
    assert!(out.contains("violation.row_2"), "{out}");
    assert!(out.contains("states_parsed = 2"), "{out}");
}

#[test]
fn ingest_missing_file_is_a_data_error() {
    let (code, _, err) = run(&["ingest", "--input", "/definitely/not/here.csv"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn unknown_flags_and_bad_overrides_are_usage_errors() {
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    let (code, _, err) = run(&["--set", "data.levelz=2", "ingest", "--input", "x.csv"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, err) = run(&["--set", "no-equals-sign", "ingest", "--input", "x.csv"]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = run(&["--help"]);
    assert_eq!(code, 0);
}

#[test]
fn full_pipeline_runs_and_outputs_carry_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    let ckpt = dir.path().join("model.ckpt");
    let samples = dir.path().join("samples");
    let eval_dir = dir.path().join("eval");
    let table = dir.path().join("ablate.csv");

    let (code, _, err) =
        run(&["synth", "--regime", "walk", "--length", "104", "--out", path_str(&data), "--seed", "9"]);
    assert_eq!(code, 0, "synth: {err}");

    let (code, out, err) = run(&[
        "train",
        "--data",
        path_str(&data),
        "--out",
        path_str(&ckpt),
    ]);
    assert_eq!(code, 0, "train: {err}");
    assert!(out.contains("windows"), "{out}");
    assert!(ckpt.is_file());
    let trace = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    assert!(trace.starts_with("# config_hash="), "{trace}");
    assert!(trace.lines().count() >= 3, "{trace}");

    let (code, _, err) = run(&[
        "sample",
        "--checkpoint",
        path_str(&ckpt),
        "--history",
        path_str(&data),
        "--out-dir",
        path_str(&samples),
        "--count",
        "2",
        "--steps",
        "2",
        "--seed",
        "5",
    ]);
    assert_eq!(code, 0, "sample: {err}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(samples.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 2);
    assert_eq!(manifest["steps"], 2);
    assert_eq!(manifest["seeds"], serde_json::json!([5, 6]));
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
    assert!(manifest["files"][0]["repair_rate"].as_f64().unwrap() <= 1.0);

    // Each sample holds history + prediction columns and begins with the
    // last history_len states of the conditioning file, verbatim.
    let sample0 = std::fs::read_to_string(samples.join("sample_00.csv")).unwrap();
    let body: Vec<&str> = sample0.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 64);
    let real: Vec<String> = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    assert_eq!(&real[real.len() - 40..], &body[..40].iter().map(|s| s.to_string()).collect::<Vec<_>>()[..]);

    let (code, out, err) = run(&[
        "--set",
        "eval.resamples=100",
        "evaluate",
        "--real",
        path_str(&data),
        "--gen",
        path_str(&samples),
        "--out-dir",
        path_str(&eval_dir),
    ]);
    assert_eq!(code, 0, "evaluate: {err}");
    assert!(out.contains("mean_l1"), "{out}");
    let report = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("# config_hash="), "{report}");
    assert!(report.contains("spread,l1,"), "{report}");
    assert!(report.contains("summary,mean_wasserstein,"), "{report}");
    assert!(eval_dir.join("report.txt").is_file());
    assert!(eval_dir.join("hist_spread.csv").is_file());

    let (code, out, err) = run(&[
        "--set",
        "eval.resamples=100",
        "--set",
        "sample.count=2",
        "ablate",
        "--checkpoint",
        path_str(&ckpt),
        "--history",
        path_str(&data),
        "--real",
        path_str(&data),
        "--out",
        path_str(&table),
        "--steps",
        "2,3",
    ]);
    assert_eq!(code, 0, "ablate: {err}");
    assert!(out.contains("steps 2:"), "{out}");
    assert!(out.contains("steps 3:"), "{out}");
    let table = std::fs::read_to_string(&table).unwrap();
    assert!(table.starts_with("# config_hash="), "{table}");
    assert!(table.contains("\n2,wall_clock,seconds,"), "{table}");
    assert!(table.contains("\n3,wall_clock,seconds,"), "{table}");
    assert!(table.contains("\n2,spread,l1,"), "{table}");
    assert!(table.contains("\n3,summary,mean_wasserstein,"), "{table}");
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    let ckpt = dir.path().join("model.ckpt");
    run(&["synth", "--regime", "walk", "--length", "104", "--out", path_str(&data), "--seed", "1"]);
    let (code, _, err) = run(&["train", "--data", path_str(&data), "--out", path_str(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    let mut outputs = Vec::new();
    for (tag, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out_dir = dir.path().join(tag);
        let (code, _, err) = run(&[
            "sample",
            "--checkpoint",
            path_str(&ckpt),
            "--history",
            path_str(&data),
            "--out-dir",
            path_str(&out_dir),
            "--count",
            "1",
            "--steps",
            "2",
            "--seed",
            seed,
        ]);
        assert_eq!(code, 0, "{err}");
        outputs.push(std::fs::read_to_string(out_dir.join("sample_00.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "same seed must reproduce bit-identical output");
    assert_ne!(outputs[0], outputs[2], "different seed must vary");
}

#[test]
fn train_can_resume_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    run(&["synth", "--regime", "walk", "--length", "104", "--out", path_str(&data), "--seed", "2"]);
    let (code, _, err) = run(&["train", "--data", path_str(&data), "--out", path_str(&first)]);
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = run(&[
        "train",
        "--data",
        path_str(&data),
        "--resume",
        path_str(&first),
        "--out",
        path_str(&second),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(second.is_file(), "{out}");
}

#[test]
fn sample_resolution_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    let ckpt = dir.path().join("model.ckpt");
    run(&["synth", "--regime", "walk", "--length", "104", "--out", path_str(&data), "--seed", "1"]);
    let (code, _, err) = run(&["train", "--data", path_str(&data), "--out", path_str(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&[
        "--set",
        "window.history_len=10",
        "sample",
        "--checkpoint",
        path_str(&ckpt),
        "--history",
        path_str(&data),
        "--out-dir",
        path_str(&dir.path().join("x")),
    ]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("64x64"), "{err}");
}

#[test]
fn sample_with_short_history_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    let short = dir.path().join("short.csv");
    let ckpt = dir.path().join("model.ckpt");
    run(&["synth", "--regime", "walk", "--length", "104", "--out", path_str(&data), "--seed", "1"]);
    run(&["synth", "--regime", "walk", "--length", "10", "--out", path_str(&short), "--seed", "1"]);
    let (code, _, err) = run(&["train", "--data", path_str(&data), "--out", path_str(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&[
        "sample",
        "--checkpoint",
        path_str(&ckpt),
        "--history",
        path_str(&short),
        "--out-dir",
        path_str(&dir.path().join("x")),
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn evaluate_rejects_a_directory_without_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("walk.csv");
    run(&["synth", "--regime", "walk", "--length", "80", "--out", path_str(&data), "--seed", "1"]);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let (code, _, err) = run(&[
        "evaluate",
        "--real",
        path_str(&data),
        "--gen",
        path_str(&empty),
        "--out-dir",
        path_str(&dir.path().join("eval")),
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn baseline_simulates_and_recalibrates_from_its_own_output() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("base.csv");
    let again = dir.path().join("again.csv");
    let (code, out, err) = run(&["baseline", "--events", "4000", "--out", path_str(&stream)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("4000 states") || out.contains("halted early"), "{out}");
    assert!(dir.path().join("base.times.csv").is_file());
    let (code, out, err) = run(&[
        "baseline",
        "--events",
        "200",
        "--out",
        path_str(&again),
        "--calibrate-from",
        path_str(&stream),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("calibrated from"), "{out}");
    // The fitted top-of-book arrival rate must sit near the true k = 1.0
    // once the timestamp companion supplies a real clock.
    let rates = out
        .split("limit rates [")
        .nth(1)
        .and_then(|s| s.split(']').next())
        .expect("rates printed");
    let first: f64 = rates.split(',').next().unwrap().trim().parse().unwrap();
    assert!((first - 1.0).abs() < 0.3, "fitted rate {first} far from 1.0");
}

#[test]
fn config_file_drives_defaults_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("book2.csv");
    let cfg = dir.path().join("run.toml");
    run(&[
        "synth", "--regime", "walk", "--length", "60", "--out", path_str(&data), "--seed", "4",
        "--levels", "2",
    ]);
    std::fs::write(&cfg, "[data]\nlevels = 2\n").unwrap();
    // The configured depth matches the file: clean scan.
    let (code, out, _) = run(&["--config", path_str(&cfg), "ingest", "--input", path_str(&data)]);
    assert_eq!(code, 0);
    assert!(out.contains("levels = 2"), "{out}");
    assert!(out.contains("violations = 0"), "{out}");
    // A flag override beats the file: depth 3 cannot be read from a
    // 2-level stream, so every row is flagged.
    let (code, out, _) = run(&[
        "--config",
        path_str(&cfg),
        "--set",
        "data.levels=3",
        "ingest",
        "--input",
        path_str(&data),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("levels = 3"), "{out}");
    assert!(out.contains("violations = 60"), "{out}");
    // Hash co-varies with the effective config.
    let (_, out_a, _) = run(&["--config", path_str(&cfg), "ingest", "--input", path_str(&data)]);
    let (_, out_b, _) = run(&["ingest", "--input", path_str(&data)]);
    let hash = |s: &str| s.lines().next().unwrap().to_string();
    assert_ne!(hash(&out_a), hash(&out_b));
}
