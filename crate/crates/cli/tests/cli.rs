use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[synth]
records = 80

[cv]
k = 2

[train]
epochs = 3
num_bases = 10
num_states = 8
state_hidden = [8]
predictor_hidden = 8
gamma_grid = [0.1, 1.0]
"#;

fn ctr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctr"))
        .current_dir(dir)
        .env_remove("CTR_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error record");
    serde_json::from_str(line).expect("error record is JSON")
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn generate_is_deterministic() {
    let dir = workdir();
    for out in ["a", "b"] {
        ok(&ctr(dir.path(), &["generate", "--states", "25", "--seed", "7", "--records", "50", "--out", out]));
    }
    for file in ["observations.csv", "labels.csv", "manifest.json", "synth.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = workdir();
    let out = ctr(dir.path(), &["generate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "usage");

    let out = ctr(dir.path(), &["generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("seed"));

    fs::write(dir.path().join("bad.toml"), "seed = 1\n[train]\nepoch = 3\n").unwrap();
    let out = ctr(dir.path(), &["--config", "bad.toml", "generate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = ctr(dir.path(), &["--seed", "1", "generate", "--states", "26"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"], "validation");
}

#[test]
fn runtime_errors_exit_one_with_record() {
    let dir = workdir();
    let out = ctr(dir.path(), &["--seed", "1", "train", "--data", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "io");
    assert!(rec["message"].as_str().unwrap().contains("manifest.json"));
}

#[test]
fn output_dir_from_environment() {
    let dir = workdir();
    let out = Command::new(env!("CARGO_BIN_EXE_ctr"))
        .current_dir(dir.path())
        .env("CTR_OUTPUT_DIR", "from-env")
        .args(["generate", "--seed", "1", "--records", "10"])
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("from-env/manifest.json").exists());
}

#[test]
fn train_evaluate_featurize() {
    let dir = workdir();
    let d = dir.path();
    ok(&ctr(d, &["--config", "tiny.toml", "generate", "--out", "data"]));
    ok(&ctr(d, &["--config", "tiny.toml", "train", "--data", "data", "--out", "model"]));
    let history = fs::read_to_string(d.join("model/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert!(first["validation_c_index"].is_number());

    ok(&ctr(
        d,
        &[
            "--config",
            "tiny.toml",
            "evaluate",
            "--data",
            "data",
            "--checkpoint",
            "model/checkpoint.json",
            "--out",
            "ev",
        ],
    ));
    let scores: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ev/scores.json")).unwrap()).unwrap();
    assert_eq!(scores["folds"].as_array().unwrap().len(), 1);

    ok(&ctr(
        d,
        &[
            "--config",
            "tiny.toml",
            "featurize",
            "--data",
            "data",
            "--checkpoint",
            "model/checkpoint.json",
            "--static",
            "--out",
            "ft",
        ],
    ));
    let features = fs::read_to_string(d.join("ft/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 81);
    assert!(features.starts_with("record_id,z0,"));
    let header = fs::read_to_string(d.join("ft/static_features.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 1 + 21);
}

#[test]
fn evaluate_folds_and_period_report() {
    let dir = workdir();
    let d = dir.path();
    ok(&ctr(d, &["--config", "tiny.toml", "generate", "--out", "data"]));
    fs::write(d.join("static.toml"), format!("{TINY}model = \"static\"\n")).unwrap();
    ok(&ctr(d, &["--config", "tiny.toml", "evaluate", "--data", "data", "--out", "n"]));
    ok(&ctr(d, &["--config", "static.toml", "evaluate", "--data", "data", "--out", "s"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("n/scores.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
    ok(&ctr(
        d,
        &[
            "report",
            "--a",
            "n/scores.json",
            "--b",
            "s/scores.json",
            "--data",
            "data",
            "--thresholds",
            "0,3,4",
            "--out",
            "rep",
        ],
    ));
    let csv = fs::read_to_string(d.join("rep/period.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(fs::read_to_string(d.join("rep/period.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn bench_is_byte_identical_and_reports_render() {
    let dir = workdir();
    let d = dir.path();
    ok(&ctr(d, &["--config", "tiny.toml", "bench", "--out", "b1"]));
    ok(&ctr(d, &["--config", "tiny.toml", "bench", "--out", "b2"]));
    for file in ["bench.json", "comparison.csv", "comparison.svg", "period.csv", "period.svg"] {
        assert_eq!(fs::read(d.join("b1").join(file)).unwrap(), fs::read(d.join("b2").join(file)).unwrap(), "{file}");
    }
    let table = fs::read_to_string(d.join("b1/comparison.csv")).unwrap();
    for method in ["CTR-D-True", "CTR-D-Minus", "CTR-D-Plus", "CTR-K", "CTR-N", "Static"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{method},"))), "{method}");
    }
    ok(&ctr(d, &["report", "--bench", "b1/bench.json", "--out", "r"]));
    assert_eq!(fs::read(d.join("r/comparison.csv")).unwrap(), fs::read(d.join("b1/comparison.csv")).unwrap());
}

#[test]
fn gradcheck_passes_on_small_nets() {
    let dir = workdir();
    let out =
        ctr(dir.path(), &["--config", "tiny.toml", "gradcheck", "--seeds", "0", "--max-per-block", "25", "--out", "g"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("ok")), "{stdout}");
    assert!(dir.path().join("g/gradcheck.json").exists());
}
