use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn iat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iat"))
        .args(args)
        .output()
        .expect("spawn iat")
}

fn ok(args: &[&str]) -> Output {
    let out = iat(args);
    assert!(
        out.status.success(),
        "iat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn log_lines(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("train.log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_is_deterministic_and_validates_size() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--out", path(&a), "--scenes", "12", "--seed", "7"]);
    ok(&["generate", "--out", path(&b), "--scenes", "12", "--seed", "7"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 12);

    let bad = iat(&["generate", "--out", path(&tmp.path().join("c")), "--size", "48"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(iat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(iat(&["check", "--suite", "nope"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["generate", "--out", path(&data), "--scenes", "2"]);
    let out = iat(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&tmp.path().join("r")),
        "--set",
        "no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = tmp.path().join("bad.conf");
    fs::write(&cfg, "d_model = 32\nlearning_rate = 1\n").unwrap();
    let out = iat(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out",
        path(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iat(&[
        "eval",
        "--checkpoint",
        path(&tmp.path().join("missing.iatc")),
        "--data",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_suites() {
    let out = ok(&["check", "--suite", "params"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("441") && text.contains("873"));
    ok(&["check", "--suite", "pe"]);
    ok(&["check", "--suite", "match"]);
}

#[test]
fn train_resume_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--out", path(&data), "--scenes", "6", "--seed", "3"]);
    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, "# short run\nsteps = 4\nbatch_size = 2\ncheckpoint_every = 2\n").unwrap();

    let full = tmp.path().join("full");
    ok(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out",
        path(&full),
    ]);
    let resolved = fs::read_to_string(full.join("config.resolved")).unwrap();
    assert!(resolved.contains("steps = 4") && resolved.contains("batch_size = 2"));
    let lines = log_lines(&full);
    assert_eq!(lines.len(), 5);
    assert!(lines[4]["train_mask_iou"].is_number() && lines[4]["matched"].is_number());

    // two steps, then resume for the remaining two
    let half = tmp.path().join("half");
    ok(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out",
        path(&half),
        "--set",
        "steps=2",
    ]);
    let resumed = tmp.path().join("resumed");
    let ckpt = half.join("checkpoint.iatc");
    ok(&[
        "train",
        "--resume",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&resumed),
        "--set",
        "steps=4",
    ]);
    let tail = log_lines(&resumed);
    assert_eq!(tail[0]["step"], 3);
    assert_eq!(tail[0], lines[2]);
    assert_eq!(tail[1], lines[3]);
    let bad = iat(&[
        "train",
        "--resume",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&resumed),
        "--set",
        "lr=1",
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let ckpt = full.join("checkpoint.iatc");
    let first = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data)]).stdout;
    let second = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data)]).stdout;
    assert_eq!(first, second);
    let report: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["images"], 6);
    assert!(report["mask_ap"].as_f64().unwrap() < 0.05);

    let image = data.join("scene_00000.iatw");
    let out = tmp.path().join("inst");
    let args = [
        "infer",
        "--checkpoint",
        path(&ckpt),
        "--image",
        path(&image),
        "--out",
        path(&out),
        "--set",
        "score_threshold=0",
        "--set",
        "top_k=100",
    ];
    ok(&args);
    let sidecar = fs::read_to_string(out.join("instances.txt")).unwrap();
    let instances: Vec<_> = sidecar.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(instances.len(), 20);
    let pgm = fs::read(out.join("instance_00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    let snapshot = dir_bytes(&out);
    ok(&args);
    assert_eq!(dir_bytes(&out), snapshot);
}

#[test]
fn mask_stages_zero_logs_zero_mask_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--out", path(&data), "--scenes", "4", "--seed", "9"]);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&run),
        "--set",
        "steps=3",
        "--set",
        "batch_size=2",
        "--set",
        "mask_stages=0",
    ]);
    let lines = log_lines(&run);
    for l in &lines[..3] {
        assert_eq!(l["dice"], 0.0);
        assert_eq!(l["bce"], 0.0);
        assert!(l["cls"].as_f64().unwrap() > 0.0);
    }
}
