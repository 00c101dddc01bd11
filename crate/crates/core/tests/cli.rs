use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "world": {"canvas": 32, "frames": 4, "max_actors": 1, "min_half": 4.0, "max_half": 5.0, "speed": 1.0, "growth": 0.5},
  "model": {
    "embed_dim": 8, "l_max": 6, "resolutions": [2, 8, 32],
    "video_stack": [
      {"kernel": [3, 3, 3], "stride": [1, 2, 2], "channels": 8},
      {"kernel": [3, 3, 3], "stride": [2, 2, 2], "channels": 8},
      {"kernel": [1, 3, 3], "stride": [1, 2, 2], "channels": 8},
      {"kernel": [1, 3, 3], "stride": [1, 2, 2], "channels": 8}
    ],
    "decoder_widths": [8, 8]
  },
  "train": {"iterations": ITERS, "decay_every": 3, "clip_len": 2, "batch_size": 2}
}"#;

fn actseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = actseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path, iters: usize) -> PathBuf {
    let p = dir.join(format!("tiny_{iters}.json"));
    fs::write(&p, TINY.replace("ITERS", &iters.to_string())).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root` with its bytes, in path order.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_owned(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_commands_and_flags() {
    let top = ok(&["--help"]);
    for cmd in [
        "gen",
        "train",
        "segment",
        "eval",
        "eval-pairs",
        "gradcheck",
        "--threads",
    ] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
    let seg = ok(&["segment", "--help"]);
    for flag in [
        "--checkpoint",
        "--video",
        "--sentence",
        "--out",
        "--dump-responses",
        "--split",
    ] {
        assert!(seg.contains(flag), "missing {flag}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(actseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(actseg(&["gen", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn gen_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--config", s(&cfg), "--out", s(&a), "--count", "10"]);
    ok(&["gen", "--config", s(&cfg), "--out", s(&b), "--count", "10"]);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(fs::read_dir(a.join("videos")).unwrap().count(), 10);
    let csv = fs::read_to_string(a.join("annotations.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    let again = actseg(&["gen", "--config", s(&cfg), "--out", s(&a), "--count", "10"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&a),
        "--count",
        "10",
        "--force",
    ]);
    assert_eq!(tree(&a), tree(&b));

    let zero = actseg(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("z")),
        "--count",
        "0",
    ]);
    assert_eq!(zero.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"train": {"iterations": 3, "momentum": 0.9}}"#).unwrap();
    let out = actseg(&[
        "gen",
        "--config",
        s(&p),
        "--out",
        s(&dir.path().join("d")),
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn missing_data_dir_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = actseg(&[
        "train",
        "--data",
        s(&dir.path().join("nope")),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_resume_segment_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (c6, c9) = (config(d, 6), config(d, 9));
    let data = d.join("data");
    ok(&[
        "gen",
        "--config",
        s(&c6),
        "--out",
        s(&data),
        "--count",
        "4",
        "--test-count",
        "2",
    ]);

    let (m1, m2) = (d.join("m1"), d.join("m2"));
    ok(&[
        "train",
        "--config",
        s(&c6),
        "--data",
        s(&data),
        "--out",
        s(&m1),
    ]);
    ok(&[
        "train",
        "--config",
        s(&c6),
        "--data",
        s(&data),
        "--out",
        s(&m2),
        "--threads",
        "1",
    ]);
    assert_eq!(
        fs::read(m1.join("model.ckpt")).unwrap(),
        fs::read(m2.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(m1.join("loss.csv")).unwrap(),
        fs::read(m2.join("loss.csv")).unwrap()
    );

    // the schedule's decay boundary shows up in the log
    let log = fs::read_to_string(m1.join("loss.csv")).unwrap();
    let lrs: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        lrs,
        ["0.001", "0.001", "0.001", "0.0001", "0.0001", "0.0001"]
    );

    let refused = actseg(&[
        "train",
        "--config",
        s(&c6),
        "--data",
        s(&data),
        "--out",
        s(&m1),
    ]);
    assert_eq!(refused.status.code(), Some(1));

    // 6 + 3 resumed iterations equal 9 straight ones
    let ckpt = m1.join("model.ckpt");
    ok(&[
        "train",
        "--config",
        s(&c9),
        "--data",
        s(&data),
        "--out",
        s(&m1),
        "--resume",
        s(&ckpt),
    ]);
    let m3 = d.join("m3");
    ok(&[
        "train",
        "--config",
        s(&c9),
        "--data",
        s(&data),
        "--out",
        s(&m3),
    ]);
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(m3.join("model.ckpt")).unwrap()
    );
    let resumed = fs::read_to_string(m1.join("loss.csv")).unwrap();
    assert_eq!(resumed, fs::read_to_string(m3.join("loss.csv")).unwrap());
    assert_eq!(resumed.lines().last().unwrap().split(',').next(), Some("8"));

    let mask = d.join("mask.pgm");
    let resp = d.join("resp");
    ok(&[
        "segment",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--video",
        "test_00000",
        "--sentence",
        "red square moving left",
        "--out",
        s(&mask),
        "--dump-responses",
        s(&resp),
    ]);
    assert!(fs::read(&mask).unwrap().starts_with(b"P5"));
    for r in [2, 8, 32] {
        assert!(resp.join(format!("response_{r}.pfm")).exists());
    }

    let preds = d.join("preds");
    ok(&[
        "segment",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "test",
        "--out",
        s(&preds),
    ]);
    let report = d.join("report.json");
    let table = ok(&[
        "eval",
        "--pred-dir",
        s(&preds),
        "--gt-dir",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert!(table.contains("P@0.5") && table.contains("mAP"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["samples"], 2);

    let pairs = d.join("pairs.json");
    ok(&[
        "eval-pairs",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&pairs),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&pairs).unwrap()).unwrap();
    assert!(json["class_average_acc"].as_f64().unwrap() <= 1.0);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let out = ok(&["gradcheck", "--config", s(&cfg), "--probes", "3"]);
    assert!(out.contains("all blocks pass"));
    let strict = actseg(&[
        "gradcheck",
        "--config",
        s(&cfg),
        "--probes",
        "3",
        "--tol",
        "0",
    ]);
    assert_eq!(strict.status.code(), Some(2));
}
