//! Reference-to-target transfer experiment: generate both centers, train the
//! master on the reference, calibrate on the target, and evaluate both models
//! on both test sets.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    apply_center_shift, extract_slide_patches, CenterProfile, generate_dataset, DatagenError, DatasetConfig, DatasetManifest,
    ExtractConfig, PatchDataset, ProfileDelta, SlideLayout,
};
use crate::evaluation::{confusion, slide_score, Class, EvalLevel, MetricsReport};
use crate::model::forest::derive_seed;
use crate::model::{calibrate, train_master, ArchConfig, HybridConfig, HybridModel, PatchSet, TrainConfig, TrainLog, TrainOutcome};
use crate::pipeline::evaluate_patches;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub reference: DatasetConfig,
    pub target: DatasetConfig,
    /// Stain shift from the reference profile to the target profile.
    pub shift: ProfileDelta,
    pub extract: ExtractConfig,
    pub model: HybridConfig,
    /// Share of training slides kept for training; the rest validate.
    pub validation_ratio: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let reference = DatasetConfig {
            patients: 18,
            slides_per_patient: [2, 3],
            layout: SlideLayout { side: 4096, ..Default::default() },
            ic_slide_fraction: 0.5,
            seed: 1,
            ..Default::default()
        };
        // Target: several times fewer training patches than the reference, with a larger
        // held-out share so the slide-level test set still has enough IC slides.
        let target = DatasetConfig {
            patients: 40,
            slides_per_patient: [1, 1],
            layout: SlideLayout { side: 2048, ..Default::default() },
            ic_slide_fraction: 0.75,
            split_ratio: 0.5,
            profile: CenterProfile { center_id: "target".into(), seed: 1, ..Default::default() },
            seed: 2,
            ..Default::default()
        };
        let model = HybridConfig {
            arch: ArchConfig { input_side: 32, ..Default::default() },
            train: TrainConfig { batch_size: 16, patience: 10, ..Default::default() },
            ..Default::default()
        };
        Self {
            reference,
            target,
            shift: ProfileDelta { hue: -0.1, saturation: 1.1, brightness: -10.0, grain: 1.0 },
            extract: ExtractConfig { input_side: 32, ..Default::default() },
            model,
            validation_ratio: 0.8,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub slides: usize,
    pub ic_slides: usize,
    pub labeled_patches: usize,
    pub train_patches: usize,
    pub val_patches: usize,
    pub test_patches: usize,
    pub test_slides: usize,
    pub test_ic_slides: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub reference: DatasetSummary,
    pub target: DatasetSummary,
    /// Target over reference training patches.
    pub train_patch_ratio: f64,
    pub master_reference: MetricsReport,
    pub master_target: MetricsReport,
    pub calibrated_target: MetricsReport,
    pub calibrated_reference: MetricsReport,
    pub calibrated_target_slides: MetricsReport,
    pub master_log: TrainLog,
    pub calibration_log: TrainLog,
    pub data_ratio_warning: Option<String>,
    pub generation_ms: f64,
    pub training_ms: f64,
    pub evaluation_ms: f64,
}

/// One center's data, split into train, validation and test by patient.
pub struct CenterData {
    pub manifest: DatasetManifest,
    pub patches: PatchDataset,
    pub train: PatchSet,
    pub val: PatchSet,
    pub test: PatchSet,
    pub val_slides: Vec<crate::model::SlidePatches>,
    pub test_slides: Vec<crate::model::SlidePatches>,
}

/// Generates a center and extracts its patches slide by slide, so only one
/// pyramid per worker is alive at a time.
pub fn build_center(cfg: &DatasetConfig, extract: &ExtractConfig, validation_ratio: f64, seed: u64) -> Result<CenterData, DatagenError> {
    let grouping = crate::datagen::default_grouping();
    let (manifest, slides) = generate_dataset(cfg, |entry, patient, g| {
        extract_slide_patches(entry, patient, &g.pyramid, &grouping, extract)
    })?;
    split_center(manifest, PatchDataset { slides }, validation_ratio, seed)
}

/// Splits extracted patches into train, validation and test sets. Test is the
/// manifest's split; validation is a patient-disjoint share of its train side.
pub fn split_center(manifest: DatasetManifest, patches: PatchDataset, validation_ratio: f64, seed: u64) -> Result<CenterData, DatagenError> {
    let val_split = manifest.validation_split(validation_ratio, seed)?;
    if val_split.test.is_empty() {
        return Err(DatagenError::Manifest(format!(
            "center {} has too few training patients for a validation split",
            manifest.center_id
        )));
    }
    let in_val = |id: &str| val_split.test.iter().any(|s| s == id);
    let in_train = |id: &str| val_split.train.iter().any(|s| s == id);
    let in_test = |id: &str| manifest.split.test.iter().any(|s| s == id);
    Ok(CenterData {
        train: patches.patch_set(in_train),
        val: patches.patch_set(in_val),
        test: patches.patch_set(in_test),
        val_slides: patches.slide_patches(in_val),
        test_slides: patches.slide_patches(in_test),
        manifest,
        patches,
    })
}

/// Seed of the validation split for the reference (`0`) or target (`1`) center.
pub fn validation_seed(seed: u64, center_index: u64) -> u64 {
    derive_seed(seed, 10 + center_index)
}

pub fn master_stage(reference: &CenterData, cfg: &HybridConfig, seed: u64) -> Result<TrainOutcome, DatagenError> {
    Ok(train_master(&reference.train, &reference.val, &reference.val_slides, cfg, seed)?)
}

pub fn calibration_stage(master: &HybridModel, target: &CenterData, cfg: &HybridConfig, seed: u64) -> Result<TrainOutcome, DatagenError> {
    let center = target.manifest.center_id.clone();
    Ok(calibrate(master, &center, &target.train, &target.val, &target.val_slides, cfg, derive_seed(seed, 12))?)
}

impl CenterData {
    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            slides: self.patches.slides.len(),
            ic_slides: self.patches.slides.iter().filter(|s| s.is_ic).count(),
            labeled_patches: self.patches.labeled_count(),
            train_patches: self.train.len(),
            val_patches: self.val.len(),
            test_patches: self.test.len(),
            test_slides: self.test_slides.len(),
            test_ic_slides: self.test_slides.iter().filter(|s| s.label).count(),
        }
    }
}

/// Slide-level report: each slide's class from its retained patch scores.
pub fn evaluate_slide_set(model: &HybridModel, slides: &[crate::model::SlidePatches], center: &str) -> Result<MetricsReport, DatagenError> {
    let mut preds = Vec::with_capacity(slides.len());
    for s in slides {
        let scores = model.predict_many(&s.patches)?;
        preds.push(Class::from_positive(slide_score(&scores, model.patch_threshold) > model.slide_threshold));
    }
    let truth: Vec<Class> = slides.iter().map(|s| Class::from_positive(s.label)).collect();
    let counts = confusion(&preds, &truth)?;
    Ok(MetricsReport::new(EvalLevel::Slide, center, model.slide_threshold, counts))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, HybridModel, HybridModel), DatagenError> {
    if cfg.extract.input_side != cfg.model.arch.input_side {
        return Err(DatagenError::OutOfRange(format!(
            "extract.input_side {} differs from model.arch.input_side {}",
            cfg.extract.input_side, cfg.model.arch.input_side
        )));
    }
    let t = Instant::now();
    let target_cfg = DatasetConfig {
        profile: apply_center_shift(&cfg.reference.profile, &cfg.shift, &cfg.target.profile.center_id)?,
        ..cfg.target.clone()
    };
    let reference = build_center(&cfg.reference, &cfg.extract, cfg.validation_ratio, validation_seed(cfg.seed, 0))?;
    let target = build_center(&target_cfg, &cfg.extract, cfg.validation_ratio, validation_seed(cfg.seed, 1))?;
    let generation_ms = ms(t);
    log::info!("generated {:?} / {:?}", reference.summary(), target.summary());

    let t = Instant::now();
    let master = master_stage(&reference, &cfg.model, cfg.seed)?;
    log::info!("master trained in {} epochs", master.log.epochs.len());
    let calibrated = calibration_stage(&master.model, &target, &cfg.model, cfg.seed)?;
    let training_ms = ms(t);

    let t = Instant::now();
    let (r, g) = (&cfg.reference.profile.center_id, &target_cfg.profile.center_id);
    let report = ExperimentReport {
        reference: reference.summary(),
        target: target.summary(),
        train_patch_ratio: target.train.len() as f64 / reference.train.len().max(1) as f64,
        master_reference: evaluate_patches(&master.model, &reference.test, r)?,
        master_target: evaluate_patches(&master.model, &target.test, g)?,
        calibrated_target: evaluate_patches(&calibrated.model, &target.test, g)?,
        calibrated_reference: evaluate_patches(&calibrated.model, &reference.test, r)?,
        calibrated_target_slides: evaluate_slide_set(&calibrated.model, &target.test_slides, g)?,
        master_log: master.log,
        calibration_log: calibrated.log,
        data_ratio_warning: calibrated.warning.map(|w| w.to_string()),
        generation_ms,
        training_ms,
        evaluation_ms: ms(t),
    };
    Ok((report, master.model, calibrated.model))
}
