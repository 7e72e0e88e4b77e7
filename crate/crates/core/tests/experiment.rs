use std::collections::HashMap;

use icscan::datagen::{DatagenError, DatasetConfig, SlideLayout};
use icscan::experiment::{build_center, run_experiment, validation_seed, ExperimentConfig};
use icscan::model::Provenance;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let center = |patients, seed| DatasetConfig {
        patients,
        slides_per_patient: [1, 1],
        layout: SlideLayout { side: 2048, ..Default::default() },
        ic_slide_fraction: 1.0,
        seed,
        ..Default::default()
    };
    cfg.reference = center(8, 1);
    cfg.target = DatasetConfig { profile: cfg.target.profile.clone(), ..center(12, 2) };
    cfg.model.train.max_epochs = 2;
    cfg.model.forest.n_trees = 10;
    cfg
}

#[test]
fn small_experiment_reports_reconcile_and_repeat() {
    let cfg = small();
    let (rep, master, calibrated) = run_experiment(&cfg).unwrap();
    let total = |c: &icscan::evaluation::ConfusionCounts| c.tp + c.fp + c.fn_ + c.tn;
    assert_eq!(total(&rep.master_reference.counts), rep.reference.test_patches as u64);
    assert_eq!(total(&rep.calibrated_reference.counts), rep.reference.test_patches as u64);
    assert_eq!(total(&rep.master_target.counts), rep.target.test_patches as u64);
    assert_eq!(total(&rep.calibrated_target_slides.counts), rep.target.test_slides as u64);
    for s in [&rep.reference, &rep.target] {
        assert_eq!(s.train_patches + s.val_patches + s.test_patches, s.labeled_patches);
    }
    let ratio = rep.target.train_patches as f64 / rep.reference.train_patches as f64;
    assert!((rep.train_patch_ratio - ratio).abs() < 1e-12);
    // equal-sized centers are far from the expected data ratio
    assert!(rep.data_ratio_warning.is_some());
    assert_eq!(master.provenance, Provenance::Master);
    assert_eq!(calibrated.provenance, Provenance::Calibrated { center: "target".into() });
    assert_eq!(rep.master_target.threshold, master.patch_threshold);
    assert_eq!(rep.calibrated_target.threshold, calibrated.patch_threshold);

    let (rep2, master2, calibrated2) = run_experiment(&cfg).unwrap();
    assert_eq!(master, master2);
    assert_eq!(calibrated, calibrated2);
    assert_eq!(rep.calibrated_target, rep2.calibrated_target);
}

#[test]
fn center_splits_are_patient_disjoint() {
    let cfg = small();
    let data = build_center(&cfg.reference, &cfg.extract, cfg.validation_ratio, validation_seed(cfg.seed, 0)).unwrap();
    let val = data.manifest.validation_split(cfg.validation_ratio, validation_seed(cfg.seed, 0)).unwrap();
    let owner: HashMap<&str, &str> =
        data.manifest.slides().map(|(p, s)| (s.slide_id.as_str(), p.patient_id.as_str())).collect();
    let side = |ids: &[String]| ids.iter().map(|s| owner[s.as_str()]).collect::<std::collections::HashSet<_>>();
    let (tr, va, te) = (side(&val.train), side(&val.test), side(&data.manifest.split.test));
    assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(val.train.len() + val.test.len() + data.manifest.split.test.len(), data.manifest.slides().count());
    assert_eq!(data.test_slides.len(), data.manifest.split.test.len());
    assert_eq!(data.val_slides.len(), val.test.len());
}

#[test]
fn input_side_mismatch_is_rejected_up_front() {
    let mut cfg = small();
    cfg.model.arch.input_side = 64;
    assert!(matches!(run_experiment(&cfg), Err(DatagenError::OutOfRange(_))));
}

#[test]
fn too_few_patients_for_validation() {
    let mut cfg = small();
    cfg.reference.patients = 2;
    let r = build_center(&cfg.reference, &cfg.extract, cfg.validation_ratio, 0);
    assert!(matches!(r, Err(DatagenError::Manifest(_))), "{:?}", r.err());
}
