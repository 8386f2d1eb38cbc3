//! End-to-end smoke tests for the `cam` binary: every subcommand, plus the
//! exit-code contract (0 success, 1 usage, 2 verification failure, 3 runtime).

use std::path::Path;
use std::process::{Command, Output};

fn cam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cam")).args(args).output().expect("spawn cam")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Minimal config: 2-sample batches, 2 epochs over 4 samples → 4 steps.
const TINY_CONFIG: &str = r#"
variant = "toy"
seed = 3

[optim]
batch_size = 2
warmup_epochs = 1
total_epochs = 2

[log]
every = 1

[augment]
enabled = false
"#;

fn synth(dir: &Path, n: usize) {
    let out = cam(&["synth", "--out", dir.to_str().unwrap(), "--n", &n.to_string(), "--seed", "5"]);
    assert_eq!(code(&out), 0, "synth failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 4);
    for sub in ["images", "masks"] {
        let n = std::fs::read_dir(dir.path().join(sub)).unwrap().count();
        assert_eq!(n, 4, "{sub} should hold one file per sample");
    }
    assert!(dir.path().join("labels.jsonl").exists());
    assert!(dir.path().join("meta.json").exists());
}

#[test]
fn train_eval_infer_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 4);
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let run = dir.path().join("run");

    let out = cam(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("ckpt-final.bin");
    assert!(ckpt.exists());
    assert!(run.join("metrics.csv").exists());

    let out = cam(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("eval prints JSON");
    assert_eq!(report["n"], 4);
    let wa = report["word_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&wa));
    assert_eq!(report["predictions"].as_array().unwrap().len(), 4);

    let img = data.join("images").join("000000.png");
    let out = cam(&["infer", "--ckpt", ckpt.to_str().unwrap(), img.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "infer failed: {}", String::from_utf8_lossy(&out.stderr));
    let line = stdout(&out);
    assert!(line.starts_with(img.to_str().unwrap()), "infer echoes the path: {line}");

    let masks = dir.path().join("masks");
    let out = cam(&[
        "export-masks",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        masks.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "export-masks failed: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), 4);
    let png = image::open(masks.join("000000.png")).unwrap().into_luma8();
    assert_eq!((png.width(), png.height()), (128, 32));
}

#[test]
fn gradcheck_is_deterministic_and_passes() {
    let a = cam(&["gradcheck", "--module", "objective", "--seed", "7"]);
    let b = cam(&["gradcheck", "--module", "objective", "--seed", "7"]);
    assert_eq!(code(&a), 0, "gradcheck failed: {}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b), "same seed must reproduce identical values");
    assert!(stdout(&a).contains("PASS"));
}

#[test]
fn exit_codes_follow_the_contract() {
    // Usage errors → 1.
    assert_eq!(code(&cam(&["frobnicate"])), 1);
    assert_eq!(code(&cam(&["synth", "--out"])), 1);
    assert_eq!(code(&cam(&["gradcheck", "--module", "bogus"])), 1);
    // Help/version are successes.
    assert_eq!(code(&cam(&["--help"])), 0);
    // Runtime errors → 3.
    assert_eq!(code(&cam(&["train", "--config", "/no/such.toml", "--data", "/tmp", "--out", "/tmp"])), 3);
    let empty = tempfile::tempdir().unwrap();
    let out = cam(&[
        "eval",
        "--ckpt",
        "/no/such.bin",
        "--data",
        empty.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}
