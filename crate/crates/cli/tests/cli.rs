use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn gsnake(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsnake")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = r#"{
  "pipeline": {"points": 128, "iterations": 2, "features": 4, "heads": 2, "width": 8, "seed": 3},
  "train": {"energy_epochs": 30, "snake_epochs": 2, "batch_size": 2}
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let o = gsnake(&["gen-data", "--out", s(&data), "--seed", "7", "--count", "6", "--size", "96x96"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, phase: &str) -> Output {
        gsnake(&[
            "train",
            "--config",
            s(&self.path("tiny.json")),
            "--data",
            s(&self.path("data")),
            "--out",
            s(&self.path(out)),
            "--phase",
            phase,
        ])
    }
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = gsnake(&["gen-data", "--out", s(d), "--seed", "7", "--count", "10", "--size", "96x96"]);
        assert!(o.status.success());
        assert!(String::from_utf8_lossy(&o.stdout).trim().ends_with("manifest.json"));
    }
    assert_eq!(tree(&a), tree(&b));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((m["width"].as_u64(), m["height"].as_u64()), (Some(96), Some(96)));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(gsnake(&["gen-data", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(gsnake(&["gen-data", "--out", "/proc/forbidden/x"]).status.code(), Some(2));
    assert_eq!(gsnake(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_eval_infer() {
    let f = Fixture::new();

    // split phases reproduce the joint run byte for byte
    assert!(f.train("split", "energy").status.success());
    assert!(f.train("split", "snake").status.success());
    assert!(f.train("all", "all").status.success());
    let a = fs::read(f.path("all/model.ckpt")).unwrap();
    assert_eq!(a, fs::read(f.path("split/model.ckpt")).unwrap());
    assert_eq!(fs::read(f.path("all/energy.ckpt")).unwrap(), fs::read(f.path("split/energy.ckpt")).unwrap());
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(f.path("all/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["pipeline"]["points"], 128);
    let log = fs::read_to_string(f.path("all/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 32);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["epoch", "phase", "loss", "lr", "wall_ms"] {
        assert!(first.get(k).is_some(), "{k}");
    }

    let ckpt = f.path("all/model.ckpt");
    let data = f.path("data");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data)];
        args.extend_from_slice(extra);
        gsnake(&args)
    };
    let o = eval(&["--boxes", "gt", "--jitter", "0", "--oracle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["mdice"].as_f64().unwrap() >= 0.99);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mean"));

    let o = eval(&["--boxes", "energy"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["mdice"].as_f64().unwrap() >= r["miou"].as_f64().unwrap());
    let again = eval(&["--boxes", "energy"]);
    assert_eq!(again.stdout, o.stdout);

    assert_eq!(eval(&["--split", "holdout"]).status.code(), Some(2));

    let img = f.path("data/test/0000.pgm");
    let overlay = f.path("overlay.ppm");
    let o = gsnake(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&img),
        "--overlay",
        s(&overlay),
        "--gt",
        s(&f.path("data/test/0000.json")),
        "--threshold",
        "150",
        "--iterations",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let inst = out["instances"].as_array().unwrap();
    assert!(!inst.is_empty());
    for i in inst {
        assert_eq!(i["contour"].as_array().unwrap().len(), 128);
        assert_eq!(i["iterations"].as_array().unwrap().len(), 2);
    }
    let ppm = fs::read(&overlay).unwrap();
    assert!(ppm.starts_with(b"P6\n96 96\n255\n"));
    assert_eq!(ppm.len(), b"P6\n96 96\n255\n".len() + 96 * 96 * 3);
    let px: Vec<&[u8]> = ppm[13..].chunks(3).collect();
    assert!(px.contains(&&[0u8, 0, 255][..]));
    assert!(px.contains(&&[255u8, 255, 0][..]));

    let missing = gsnake(&["infer", "--checkpoint", s(&ckpt), "--image", s(&f.path("nope.pgm"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.pgm"));
}

#[test]
fn config_errors_and_numeric_failure() {
    let f = Fixture::new();
    fs::write(f.path("bad.json"), r#"{"train": {"snake_epochz": 1}}"#).unwrap();
    let o = gsnake(&["train", "--config", s(&f.path("bad.json")), "--data", s(&f.path("data")), "--out", s(&f.path("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("snake_epochz"));

    fs::write(
        f.path("nan.json"),
        r#"{"pipeline": {"points": 16, "features": 4, "heads": 2, "width": 8},
            "train": {"energy_epochs": 2, "snake_epochs": 1, "inject_nan_epoch": 2}}"#,
    )
    .unwrap();
    let o = gsnake(&["train", "--config", s(&f.path("nan.json")), "--data", s(&f.path("data")), "--out", s(&f.path("n"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("n/config.json").exists());
}

#[test]
fn ablate_emits_four_rows() {
    let f = Fixture::new();
    let o = gsnake(&[
        "ablate",
        "--config",
        s(&f.path("tiny.json")),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("abl")),
        "--snake-epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("yes        yes"));
    assert!(rows[3].starts_with("no         no"));
    let j: serde_json::Value = serde_json::from_slice(&fs::read(f.path("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(j.as_array().unwrap().len(), 4);
    assert!(f.path("abl/dcim0_amem0/model.ckpt").exists());
}
