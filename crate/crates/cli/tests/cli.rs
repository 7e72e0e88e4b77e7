mod common;

use common::{fixture, icscan, ok, read_json, s, tree};
use icscan::datagen::IC_LABELS;
use icscan::pyramid::{build_pyramid, RgbImage};

const TINY: &str = r#"{"reference": {"patients": 3, "slides_per_patient": [1, 1], "layout": {"side": 1024, "nest_radius": [100.0, 180.0]}},
 "target": {"patients": 3, "slides_per_patient": [1, 1], "layout": {"side": 1024, "nest_radius": [100.0, 180.0]}}}"#;

fn tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&icscan(&["--config", s(&cfg), "gen", "--out", s(&a)], &[]));
    ok(&icscan(&["--config", s(&cfg), "gen", "--out", s(&b), "--workers", "1"], &[]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 10);
    // the snapshot records the worker count, everything else must match
    let strip = |t: Vec<(std::path::PathBuf, Vec<u8>)>| -> Vec<_> { t.into_iter().filter(|(p, _)| !p.ends_with("run-config.json")).collect() };
    assert_eq!(strip(ta), strip(tb));
    let summary = read_json(&a.join("gen-summary.json"));
    assert_eq!(summary["centers"].as_array().unwrap().len(), 2);
}

#[test]
fn ic_fraction_zero_gives_no_ic_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("d");
    ok(&icscan(&["--config", s(&cfg), "gen", "--out", s(&out), "--ic-fraction", "0"], &[]));
    for center in ["reference", "target"] {
        let m = read_json(&out.join(center).join("manifest.json"));
        for p in m["patients"].as_array().unwrap() {
            for sl in p["slides"].as_array().unwrap() {
                assert_eq!(sl["is_ic"], false);
                for a in sl["annotations"].as_array().unwrap() {
                    assert!(!IC_LABELS.contains(&a["label"].as_str().unwrap()));
                }
            }
        }
    }
}

#[test]
fn gen_single_center() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("d");
    ok(&icscan(&["--config", s(&cfg), "gen", "--out", s(&out), "--center", "target"], &[]));
    assert!(out.join("target/manifest.json").exists());
    assert!(!out.join("reference").exists());
    let bad = icscan(&["--config", s(&cfg), "gen", "--out", s(&dir.path().join("e")), "--center", "nope"], &[]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("e").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cases: Vec<Vec<&str>> = vec![
        vec!["--set", "bogus=1", "gen", "--out", s(&out)],
        vec!["--set", "model.train.patience=0", "gen", "--out", s(&out)],
        vec!["gen"],
        vec!["frobnicate"],
    ];
    for args in cases {
        assert_eq!(icscan(&args, &[]).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(icscan(&["gen", "--out", s(&out)], &[("ICSCAN_NOT_A_KEY", "1")]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(icscan(&["--config", s(&bad), "gen", "--out", s(&out)], &[]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = icscan(&["train", "--dataset", s(&dir.path().join("none")), "--out", s(&out)], &[]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn model_version_mismatch_exits_4() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(&f.model).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let model = dir.path().join("future.icsm");
    std::fs::write(&model, bytes).unwrap();
    let slide = std::fs::read_dir(f.target.join("slides")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("o");
    let r = icscan(&["--config", s(&f.config), "infer", "--model", s(&model), "--slide", s(&slide), "--out", s(&out)], &[]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
}

#[test]
fn failed_training_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d");
    // 6 patients so a validation split exists, no IC anywhere
    ok(&icscan(
        &["--config", s(&cfg), "--set", "reference.patients=6", "gen", "--out", s(&data), "--center", "reference", "--ic-fraction", "0"],
        &[],
    ));
    let out = dir.path().join("m");
    let r = icscan(&["--config", s(&cfg), "train", "--dataset", s(&data.join("reference")), "--out", s(&out)], &[]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());
}

#[test]
fn infer_blank_slide_is_rest() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let slide = dir.path().join("blank");
    build_pyramid(&RgbImage::white(1024, 1024), 256).unwrap().save(&slide).unwrap();
    let out = dir.path().join("o");
    ok(&icscan(&["--config", s(&f.config), "infer", "--model", s(&f.model), "--slide", s(&slide), "--out", s(&out)], &[]));
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["n"], 0);
    assert_eq!(r["class"], "Rest");
    assert_eq!(r["s_ic"], 0.0);
    assert_eq!(r["slide_id"], "blank");
    for name in ["heatmap.png", "filter-report.json", "timings.json", "run-config.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn infer_writes_consistent_outputs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let slide = std::fs::read_dir(f.reference.join("slides")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("o");
    ok(&icscan(&["--config", s(&f.config), "infer", "--model", s(&f.model), "--slide", s(&slide), "--out", s(&out)], &[]));
    let r = read_json(&out.join("result.json"));
    let report = read_json(&out.join("filter-report.json"));
    assert_eq!(r["n"], report["retained"]);
    assert_eq!(r["inference_accesses"], r["n"]);
    assert_eq!(r["timings"]["total_ms"], 0.0);
    let t = read_json(&out.join("timings.json"));
    let total = t["timings"]["total_ms"].as_f64().unwrap();
    assert!(t["timings"]["filter_ms"].as_f64().unwrap() + t["timings"]["inference_ms"].as_f64().unwrap() <= total);
}

#[test]
fn run_config_snapshot_reproduces_infer() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let slide = std::fs::read_dir(f.target.join("slides")).unwrap().next().unwrap().unwrap().path();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&icscan(
        &["--config", s(&f.config), "--set", "extract.filter.blur_variance_min=40", "infer", "--model", s(&f.model), "--slide", s(&slide), "--out", s(&a)],
        &[],
    ));
    let snapshot = a.join("run-config.json");
    assert_eq!(read_json(&snapshot)["extract"]["filter"]["blur_variance_min"], 40.0);
    ok(&icscan(&["--config", s(&snapshot), "infer", "--model", s(&f.model), "--slide", s(&slide), "--out", s(&b)], &[]));
    for name in ["result.json", "heatmap.png", "run-config.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.json");
    std::fs::write(
        &preds,
        r#"{"level": "slide", "threshold": 0.5, "items": [
            {"id": "a", "score": 1.0, "label": true}, {"id": "b", "score": 0.0, "label": false},
            {"score": 0.9, "label": true}, {"score": 0.5, "label": false}]}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    ok(&icscan(&["eval", "--predictions", s(&preds), "--center", "x", "--out", s(&out)], &[]));
    let m = read_json(&out.join("metrics.json"));
    for k in ["accuracy", "precision", "recall", "f1"] {
        assert_eq!(m["slide"][k], 1.0, "{k}");
    }
    assert_eq!(m["slide"]["counts"]["tp"], 2);
    assert!(m["patch"].is_null());
}

#[test]
fn eval_on_dataset_reports_both_levels() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&icscan(&["--config", s(&f.config), "eval", "--model", s(&f.model), "--dataset", s(&f.reference), "--out", s(&out)], &[]));
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["patch"]["level"], "patch");
    assert_eq!(m["slide"]["level"], "slide");
    let n = m["slides"].as_array().unwrap().len() as u64;
    let c = &m["slide"]["counts"];
    assert_eq!(c["tp"].as_u64().unwrap() + c["fp"].as_u64().unwrap() + c["tn"].as_u64().unwrap() + c["fn"].as_u64().unwrap(), n);
}

#[test]
fn calibrate_reports_provenance_and_ratio() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&icscan(&["--config", s(&f.config), "calibrate", "--model", s(&f.model), "--dataset", s(&f.target), "--out", s(&out)], &[]));
    let model = icscan::model::HybridModel::load(&out.join("model.icsm")).unwrap();
    assert_eq!(model.provenance, icscan::model::Provenance::Calibrated { center: "target".into() });
    let log = read_json(&out.join("train-log.json"));
    // the small fixture has about as much target data as reference data
    assert!(log["warning"].is_string());
}

#[test]
fn bench_reports_invariants() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    ok(&icscan(&["--config", s(&f.config), "bench", "--model", s(&f.model), "--dataset", s(&f.target), "--out", s(&out)], &[]));
    let b = read_json(&out.join("bench.json"));
    let slides = b["slides"].as_array().unwrap();
    assert_eq!(slides.len(), 5);
    assert_eq!(b["invariants_hold"], true);
    for sl in slides {
        let f = |k: &str| sl[k].as_f64().unwrap();
        assert!(f("filter_ms") + f("inference_ms") <= f("total_ms"));
        assert_eq!(sl["inference_accesses"], sl["retained"]);
    }
    // the environment layer overrides the default slide count
    let out2 = dir.path().join("b2");
    ok(&icscan(
        &["--config", s(&f.config), "bench", "--model", s(&f.model), "--dataset", s(&f.target), "--out", s(&out2)],
        &[("ICSCAN_BENCH_SLIDES", "2")],
    ));
    assert_eq!(read_json(&out2.join("bench.json"))["slides"].as_array().unwrap().len(), 2);
}

#[test]
fn infer_is_identical_across_worker_counts() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let slide = std::fs::read_dir(f.target.join("slides")).unwrap().next().unwrap().unwrap().path();
    let run = |w: &str| {
        let out = dir.path().join(format!("w{w}"));
        ok(&icscan(&["--config", s(&f.config), "--workers", w, "infer", "--model", s(&f.model), "--slide", s(&slide), "--out", s(&out)], &[]));
        (std::fs::read(out.join("result.json")).unwrap(), std::fs::read(out.join("heatmap.png")).unwrap())
    };
    assert_eq!(run("1"), run("8"));
}
