use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_serialcast"))
        .args(args)
        .env_remove("SF_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_sinusoid_csv() {
    let o = run(&["synth", "--kind", "sinusoidal", "--period", "8", "--length", "64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "value");
    assert_eq!(lines.len() - 1, 64);
    let v: Vec<f64> = lines[1..].iter().map(|l| l.parse().unwrap()).collect();
    assert!((v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let o = run(&["synth", "--kind", "linear", "--length", "4", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = run(&["train", "--out", "x", "--batch_size", "0", "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn invalid_signal_parameters_exit_one() {
    let o = run(&["synth", "--kind", "sinusoidal", "--period", "0", "--length", "8"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().count() >= 10);
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn missing_data_root_is_reported() {
    let o = run(&["stats"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SF_DATA_DIR"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let shards = dir.path().join("shards");
    let post = dir.path().join("post");
    let ck = dir.path().join("model.ckpt");
    let ck2 = dir.path().join("post.ckpt");
    let csv = dir.path().join("series.csv");

    let o = run(&["synth", "--kind", "toy", "--count", "8", "--length", "200", "--format", "shard", "--out", p(&shards), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&["synth", "--kind", "toy", "--count", "4", "--length", "200", "--format", "shard", "--out", p(&post), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = run(&["stats", "--data", p(&shards)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"forecastability\""));

    let train = ["train", "--preset", "tiny", "--data", p(&shards), "--out", p(&ck), "--steps", "3", "--batch_size", "2", "--seed", "5"];
    let o = run(&train);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("stp_variant=serial"), "effective config echoed");
    let first = fs::read(&ck).unwrap();
    let o = run(&train);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&ck).unwrap(), first, "identical argv gives identical checkpoints");

    let o = run(&["posttrain", "--from", p(&ck), "--data", p(&post), "--revisit", p(&shards), "--out", p(&ck2), "--steps", "2", "--batch_size", "2", "--extend_n_max", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = run(&["synth", "--kind", "toy", "--length", "40", "--out", p(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&["forecast", "--checkpoint", p(&ck2), "--input", p(&csv), "--horizon", "10", "--sort_quantiles"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), "step,q0.1,q0.5,q0.9");
    assert_eq!(text.lines().count(), 11);

    let o = run(&["eval", "--checkpoint", p(&ck), "--data", p(&shards), "--horizon", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for key in ["mase", "crps_wql", "passes_serial", "passes_rolling", "wall_ms_p50"] {
        assert!(stdout(&o).contains(&format!("\"{key}\"")), "{key}");
    }

    let o = run(&["bench", "--checkpoint", p(&ck), "--horizons", "4,12", "--reps", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let shards = dir.path().join("s");
    let cfg = dir.path().join("train.cfg");
    let o = run(&["synth", "--kind", "toy", "--count", "2", "--length", "100", "--format", "shard", "--out", p(&shards)]);
    assert_eq!(o.status.code(), Some(0));
    fs::write(&cfg, "steps=1\nbatch_size=2\npeak_lr=0.5\n").unwrap();
    let o = run(&["train", "--preset", "tiny", "--config", p(&cfg), "--peak_lr", "0.25", "--data", p(&shards), "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("steps=1") && err.contains("peak_lr=0.25"), "{err}");
    fs::write(&cfg, "stepz=1\n").unwrap();
    let o = run(&["train", "--preset", "tiny", "--config", p(&cfg), "--data", p(&shards), "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
}
