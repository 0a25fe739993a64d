use std::path::Path;
use std::process::{Command, Output};

use patchdiff::data::read_pnm;

fn pdm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdm"))
        .args(args)
        .env("PDM_OUT", out)
        .output()
        .expect("spawn pdm")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = pdm(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn schedule_and_split_point() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(dir.path(), &["schedule", "--respace", "4"]);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("t,beta,alpha_cum,snr,gamma"));
    let sp = ok(dir.path(), &["split-point", "--snr", "0.25"]);
    assert!(sp.contains("(1-based) 397") && sp.contains("(0-based)    396"), "{sp}");
}

#[test]
fn oracle_strip_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = ok(dir.path(), &["oracle", "--dataset", "toy:4:8", "--timesteps", "0,500,1000"]);
    let img = read_pnm(Path::new(path.trim())).unwrap();
    assert_eq!(img.shape(), &[10, 28, 1]);
}

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "train", "--dataset", "toy:8:8", "--iters", "20", "--batch", "4", "--save-every", "10"]);
    for f in ["effective_config.json", "metrics.csv", "buckets.csv", "model.json", "model_step10.json"] {
        assert!(d.join("train").join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(d.join("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    let model = d.join("train/model.json");
    ok(d, &["sample", "--model", model.to_str().unwrap(), "--count", "2", "--steps", "5", "--grid"]);
    assert!(read_pnm(&d.join("samples/sample_0001.pgm")).is_ok());
    assert!(d.join("samples/grid.pgm").exists());
}

#[test]
fn bad_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!pdm(dir.path(), &["sample", "--count", "1"]).status.success());
    assert!(!pdm(dir.path(), &["oracle", "--dataset", "toy:2:8", "--example", "5"]).status.success());
    assert!(!pdm(dir.path(), &["schedule", "--beta-t", "2"]).status.success());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "8", "train", "--dataset", "toy:6:8", "--iters", "15", "--batch", "3", "--name", "a"]);
    let echo = d.join("a/effective_config.json");
    ok(d, &["train", "--config", echo.to_str().unwrap(), "--name", "b"]);
    for f in ["model.json", "model.bin", "metrics.csv", "effective_config.json"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between the run and its echo");
    }
}
