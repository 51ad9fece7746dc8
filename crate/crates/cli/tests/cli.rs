use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use air_core::dataio::{write_idx_images, write_idx_labels, Image};
use air_core::eval::{read_pgm, write_pgm};
use tempfile::TempDir;

fn air(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_air"))
        .args(args)
        .env_remove("AIR_THREADS")
        .output()
        .expect("spawn air")
}

fn blob(cr: f64, cc: f64) -> Image {
    let px = (0..64)
        .map(|k| {
            let (r, c) = ((k / 8) as f64, (k % 8) as f64);
            (-((r - cr).powi(2) + (c - cc).powi(2)) / 3.0).exp() as f32
        })
        .collect();
    Image::new(8, 8, px).unwrap()
}

/// 40 blurred dots on an 8×8 canvas, two classes.
fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let images: Vec<Image> = (0..40)
        .map(|i| blob(2.5 + (i % 5) as f64 * 0.7, 2.5 + (i / 8) as f64 * 0.7))
        .collect();
    let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
    write_idx_images(data.join("toy-images-idx3-ubyte"), &images).unwrap();
    write_idx_labels(data.join("toy-labels-idx1-ubyte"), &labels).unwrap();
    data
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, data: &Path, epochs: &str) -> PathBuf {
    let out = dir.join("ck");
    let o = air(&[
        "train",
        "--data",
        s(data),
        "--out",
        s(&out),
        "--scales",
        "4",
        "--dim",
        "8",
        "--heads",
        "2",
        "--epochs",
        epochs,
        "--seed",
        "1",
        "--pairs",
        "16",
        "--batch",
        "8",
        "--val-pairs",
        "4",
        "--lr",
        "0.01",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_one_checkpoint_per_epoch_and_echoes_config() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("ck");
    let o = air(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--scales",
        "4",
        "--dim",
        "8",
        "--heads",
        "2",
        "--epochs",
        "2",
        "--seed",
        "1",
        "--pairs",
        "16",
        "--batch",
        "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "epoch-0000.airckpt",
        "epoch-0001.airckpt",
        "epoch-0002.airckpt",
        "best.airckpt",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert!(!out.join(".air.lock").exists());
    let echo = String::from_utf8_lossy(&o.stderr);
    for key in [
        "learning_rate",
        "adam_beta2",
        "smoothness_weight",
        "pairs_per_epoch",
        "scales",
        "hidden",
    ] {
        assert!(echo.contains(key), "resolved config lacks {key}");
    }
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let out = train_tiny(dir.path(), &data, "0");
    assert!(out.join("epoch-0000.airckpt").is_file());
    assert!(!out.join("epoch-0001.airckpt").exists());
}

#[test]
fn eval_reports_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let ck = train_tiny(dir.path(), &data, "1").join("epoch-0001.airckpt");
    let report = |name: &str| {
        let path = dir.path().join(name);
        let o = air(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&data),
            "--seed",
            "1",
            "--pairs",
            "12",
            "--out",
            s(&path),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(path).unwrap()
    };
    let a = report("a.json");
    assert_eq!(a, report("b.json"));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["pairs"], 12);
    assert!(v["mse"]["mean"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn register_with_untrained_checkpoint_returns_the_moving_image() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let ck = train_tiny(dir.path(), &data, "0").join("epoch-0000.airckpt");
    let fixed = dir.path().join("f.pgm");
    let moving = dir.path().join("m.pgm");
    write_pgm(&fixed, &blob(3.0, 3.0)).unwrap();
    write_pgm(&moving, &blob(5.0, 4.0)).unwrap();
    let warped = dir.path().join("w.pgm");
    let o = air(&[
        "register",
        "--checkpoint",
        s(&ck),
        "--fixed",
        s(&fixed),
        "--moving",
        s(&moving),
        "--out",
        s(&warped),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_pgm(&warped).unwrap(), read_pgm(&moving).unwrap());
    assert!(dir.path().join("w.airfld").is_file());
}

#[test]
fn register_rejects_images_at_the_wrong_size() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let ck = train_tiny(dir.path(), &data, "0").join("epoch-0000.airckpt");
    let img = dir.path().join("big.pgm");
    write_pgm(&img, &Image::constant(10, 10, 0.5).unwrap()).unwrap();
    let o = air(&[
        "register",
        "--checkpoint",
        s(&ck),
        "--fixed",
        s(&img),
        "--moving",
        s(&img),
        "--out",
        s(&dir.path().join("w.pgm")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_grid_writes_three_rows_of_tiles() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let ck = train_tiny(dir.path(), &data, "0").join("epoch-0000.airckpt");
    let grid = dir.path().join("grid.pgm");
    let o = air(&[
        "export-grid",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--pairs",
        "3",
        "--out",
        s(&grid),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = read_pgm(&grid).unwrap();
    assert_eq!(img.height(), 3 * 8);
    assert_eq!(img.width(), 3 * 8);
}

#[test]
fn argument_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("o");
    let base = [
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--scales",
        "4",
        "--dim",
        "8",
        "--heads",
        "2",
    ];
    for extra in [
        &["--no-such-flag"][..],
        &["--lr", "0"],
        &["--dropout", "1.5"],
        &["--pairing", "sideways"],
        &["--heads", "3"],
        &["--scales", "3"],
    ] {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        let o = air(&args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{extra:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(air(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_an_argument_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_air"))
        .args(["eval", "--checkpoint", "x", "--data", "y"])
        .env("AIR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nothing-here");
    let o = air(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = air(&["eval", "--checkpoint", s(&missing), "--data", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn a_locked_output_directory_is_refused() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("ck");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".air.lock"), b"").unwrap();
    let o = air(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--scales",
        "4",
        "--dim",
        "8",
        "--heads",
        "2",
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
    assert!(!out.join("epoch-0001.airckpt").exists());
}

#[test]
fn resuming_continues_the_epoch_count() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let out = train_tiny(dir.path(), &data, "1");
    let o = air(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--checkpoint",
        s(&out.join("epoch-0001.airckpt")),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("epoch-0002.airckpt").is_file());
}
