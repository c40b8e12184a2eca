use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 7

[data]
kind = "synthetic"
item_count = 80
chain_count = 2
user_count = 40

[model]
dim = 8

[meta]
max_outer_steps = 6
eval_window = 2

[joint]
steps = 6

[eval]
negatives = 20
"#;

fn metacsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacsr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = metacsr(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (cfg.to_str().unwrap().to_string(), dir.join("out").to_str().unwrap().to_string())
}

#[test]
fn prepare_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let common = ["--config", &cfg, "--output", &out];
    let summary = ok(&[&["prepare"][..], &common].concat());
    assert!(summary.contains("40 users"), "{summary}");
    ok(&[&["train"][..], &common].concat());
    let cold = ok(&[&["eval"][..], &common].concat());
    assert!(cold.starts_with("cold"), "{cold}");
    let warm = ok(&[&["eval"][..], &common, &["--scenario", "warm"]].concat());
    assert!(warm.starts_with("warm"), "{warm}");
    for f in ["checkpoint.ckpt", "trace.csv", "config.toml", "report-cold.json", "report-warm.csv"] {
        assert!(Path::new(&out).join(f).exists(), "missing {f}");
    }
    let trace = std::fs::read_to_string(Path::new(&out).join("trace.csv")).unwrap();
    assert!(trace.starts_with("# config-hash "));
}

#[test]
fn eval_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let common = ["--config", &cfg, "--output", &out];
    ok(&[&["prepare"][..], &common].concat());
    ok(&[&["train"][..], &common].concat());
    let bad = metacsr(&[&["eval"][..], &common, &["--set", "model.dim=16"]].concat());
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("config"), "{err}");
}

#[test]
fn ablate_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let common = ["--config", &cfg, "--output", &out];
    ok(&[&["prepare"][..], &common].concat());
    let printed = ok(&[&["ablate"][..], &common, &["--variants", "popularity,no-meta"]].concat());
    assert!(printed.contains("popularity") && printed.contains("no-meta"), "{printed}");
    let record = Path::new(&out).join("ablate.record.json");
    let csvs = dir.path().join("csv");
    ok(&["export", record.to_str().unwrap(), "--out", csvs.to_str().unwrap()]);
    let metrics = std::fs::read_to_string(csvs.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("ablate,popularity,,cold,auc")), "{metrics}");
    let adaptation = std::fs::read_to_string(csvs.join("adaptation.csv")).unwrap();
    assert!(adaptation.contains("ablate,no-meta,,5,"), "{adaptation}");
}

#[test]
fn unknown_variant_and_bad_override_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let common = ["--config", &cfg, "--output", &out];
    assert!(!metacsr(&[&["ablate"][..], &common, &["--variants", "nope"]].concat()).status.success());
    assert!(!metacsr(&[&["prepare"][..], &common, &["--set", "model.dim"]].concat()).status.success());
    assert!(!metacsr(&["export", "--out", out.as_str()]).status.success());
}
