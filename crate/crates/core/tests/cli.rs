use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use skyspectra::dataset;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyspectra"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .env("SKYSPECTRA_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model(dir: &Path) {
    ok(
        dir,
        &["gen-dataset", "--count", "3", "--seed", "5", "--out-dir", "corpus"],
    );
    ok(
        dir,
        &[
            "train",
            "--corpus",
            "corpus",
            "--steps",
            "2",
            "--batch",
            "1",
            "--crop",
            "16",
            "--width",
            "8",
            "--time-embed-dim",
            "16",
            "--checkpoint-every",
            "1",
            "--out",
            "m.ckpt",
        ],
    );
}

#[test]
fn pipeline_produces_every_artifact() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    tiny_model(dir);
    assert!(dir.join("corpus/manifest.toml").exists());
    let loss = fs::read_to_string(dir.join("m.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(loss.starts_with("step,loss\n"));

    ok(
        dir,
        &[
            "attack",
            "--input",
            "corpus/clean_00000.grid",
            "--mode",
            "ground",
            "--p",
            "0.4",
            "--out",
            "a.grid",
            "--mask-out",
            "mask.grid",
        ],
    );
    let attacked = dataset::read_grid(&dir.join("a.grid")).unwrap();
    assert_eq!(attacked.dims(), (128, 128));
    let mask = dataset::read_grid(&dir.join("mask.grid")).unwrap();
    assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));

    ok(
        dir,
        &[
            "reconstruct",
            "--model",
            "m.ckpt",
            "--input",
            "a.grid",
            "--t-star",
            "2",
            "--out",
            "r.grid",
        ],
    );
    let recon = dataset::read_grid(&dir.join("r.grid")).unwrap();
    assert!(recon.iter().all(|&v| (0.0..=1.0).contains(&v)));

    ok(dir, &["render", "a.grid", "r.grid", "--out-dir", "img", "--scale", "1"]);
    let png = image::open(dir.join("img/r.png")).unwrap();
    assert_eq!((png.width(), png.height()), (128, 128));
}

#[test]
fn evaluate_defaults_cover_both_modes_and_five_probabilities() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    tiny_model(dir);
    let table = ok(
        dir,
        &[
            "evaluate", "--model", "m.ckpt", "--seeds", "1", "--t-star", "1", "--out", "rep",
        ],
    );
    let csv = fs::read_to_string(dir.join("rep/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for mode in ["ground", "airborne"] {
        for p in ["0.3", "0.4", "0.5", "0.6", "0.7"] {
            assert!(
                rows.iter().any(|r| r.starts_with(&format!("{mode},{p},"))),
                "{mode} {p}"
            );
        }
    }
    assert_eq!(table, fs::read_to_string(dir.join("rep/report.txt")).unwrap());
}

#[test]
fn errors_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let missing = run(
        dir,
        &[
            "reconstruct",
            "--model",
            "nope.ckpt",
            "--input",
            "x.grid",
            "--out",
            "y.grid",
        ],
    );
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    fs::write(dir.join("bad.toml"), "[grid]\nrows = 0\n").unwrap();
    let bad = run(
        dir,
        &["--config", "bad.toml", "gen-dataset", "--count", "1", "--out-dir", "c"],
    );
    assert_eq!(bad.status.code(), Some(3));

    let usage = run(dir, &["attack", "--mode", "sideways"]);
    assert_eq!(usage.status.code(), Some(2));

    fs::write(dir.join("garbage.ckpt"), b"not a checkpoint").unwrap();
    let corrupt = run(dir, &["evaluate", "--model", "garbage.ckpt", "--out", "r"]);
    assert_eq!(corrupt.status.code(), Some(4));
}
