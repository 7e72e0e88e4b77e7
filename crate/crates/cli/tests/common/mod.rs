#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

/// Small centers and a short training schedule, for fast end-to-end runs.
pub const SMALL_CONFIG: &str = r#"{
  "reference": {"patients": 8, "slides_per_patient": [1, 1], "layout": {"side": 2048}, "ic_slide_fraction": 1.0},
  "target": {"patients": 12, "slides_per_patient": [1, 1], "layout": {"side": 2048}, "ic_slide_fraction": 1.0},
  "model": {"train": {"max_epochs": 2}, "forest": {"n_trees": 10}}
}"#;

pub fn icscan(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icscan"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ICSCAN_")) {
        cmd.env_remove(k);
    }
    cmd.env("RUST_LOG", "warn").args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Generated small datasets plus a trained master model, shared by a test binary.
pub struct Fixture {
    pub root: PathBuf,
    pub config: PathBuf,
    pub reference: PathBuf,
    pub target: PathBuf,
    pub model: PathBuf,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().expect("tempdir").keep();
        let config = root.join("small.json");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        let data = root.join("data");
        ok(&icscan(&["--config", s(&config), "gen", "--out", s(&data)], &[]));
        let master = root.join("master");
        ok(&icscan(&["--config", s(&config), "train", "--dataset", s(&data.join("reference")), "--out", s(&master)], &[]));
        Fixture {
            reference: data.join("reference"),
            target: data.join("target"),
            model: master.join("model.icsm"),
            config,
            root,
        }
    })
}

/// Every file below `dir` with its bytes, in path order.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}
