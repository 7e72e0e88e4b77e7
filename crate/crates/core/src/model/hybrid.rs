//! Backbone plus forest, with master training and target-center calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use super::convnet::{extract_features, ArchConfig, ConvNetParams, PatchTensor};
use super::forest::{derive_seed, train_forest, ForestConfig, ForestModel};
use super::train::{train_cnn, PatchSet, TrainConfig, TrainLog};
use super::ModelError;
use crate::evaluation::{f1_optimal_threshold, slide_score, EvalError};
use crate::pyramid::{downsample, RgbImage, ScaleFactor};

/// Everything needed to train a hybrid model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub forest: ForestConfig,
}

impl HybridConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.forest.n_trees == 0 {
            return Err(ModelError::InvalidConfig("forest.n_trees must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Master,
    Calibrated { center: String },
}

/// Retained patches of one validation slide with the slide's label.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePatches {
    pub slide_id: String,
    pub label: bool,
    pub patches: Vec<RgbImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    /// Backbone weights. The training head stays in the vector so calibration
    /// can warm-start from it; inference never evaluates it.
    pub convnet: ConvNetParams,
    pub forest: ForestModel,
    pub patch_threshold: f64,
    pub slide_threshold: f64,
    pub provenance: Provenance,
    pub seed: u64,
    /// Number of training patches the model was fit on.
    pub train_samples: u64,
    pub forest_config: ForestConfig,
}

/// Resize a context patch to the model input side by box filtering.
pub fn prepare_input(patch: &RgbImage, side: usize) -> Result<RgbImage, ModelError> {
    if patch.width() != patch.height() {
        return Err(ModelError::ShapeMismatch(format!("patch must be square, got {}x{}", patch.width(), patch.height())));
    }
    if patch.width() == side {
        return Ok(patch.clone());
    }
    if patch.width() < side {
        return Err(ModelError::ShapeMismatch(format!("patch side {} is below the model side {side}", patch.width())));
    }
    let factor = ScaleFactor::new(patch.width() as u32, side as u32).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    let out = downsample(patch, factor).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    if out.width() != side {
        return Err(ModelError::ShapeMismatch(format!("cannot resize {} to {side}", patch.width())));
    }
    Ok(out)
}

fn features_of(params: &ConvNetParams, patches: &[RgbImage]) -> Result<Vec<Vec<f64>>, ModelError> {
    patches.par_iter().map(|p| extract_features(params, &PatchTensor::from_image(p)?)).collect()
}

impl HybridModel {
    pub fn input_side(&self) -> usize {
        self.convnet.arch().input_side
    }

    /// IC score of one patch already at the model input side.
    pub fn predict_proba(&self, patch: &RgbImage) -> Result<f64, ModelError> {
        if patch.width() != self.input_side() || patch.height() != self.input_side() {
            return Err(ModelError::ShapeMismatch(format!(
                "model expects {0}x{0} patches, got {1}x{2}",
                self.input_side(),
                patch.width(),
                patch.height()
            )));
        }
        let f = extract_features(&self.convnet, &PatchTensor::from_image(patch)?)?;
        self.forest.predict_proba(&f)
    }

    /// IC score of a context patch of any larger side, resized on ingest.
    pub fn predict_context(&self, patch: &RgbImage) -> Result<f64, ModelError> {
        self.predict_proba(&prepare_input(patch, self.input_side())?)
    }

    /// Scores in input order; each score depends only on its own patch.
    pub fn predict_many(&self, patches: &[RgbImage]) -> Result<Vec<f64>, ModelError> {
        patches.par_iter().map(|p| self.predict_proba(p)).collect()
    }

    /// Range and structure checks on a freshly loaded or assembled model.
    pub fn validate(&self) -> Result<(), ModelError> {
        for t in [self.patch_threshold, self.slide_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(ModelError::Format(format!("threshold {t} outside [0, 1]")));
            }
        }
        if self.forest.n_features != self.convnet.arch().feature_dim() {
            return Err(ModelError::Format("forest width differs from the backbone feature size".into()));
        }
        self.forest.validate()
    }
}

/// Non-fatal notice that the target training set is outside `[1/20, 1/5]` of
/// the master's training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRatioWarning {
    pub target_samples: u64,
    pub reference_samples: u64,
    pub ratio: f64,
}

impl std::fmt::Display for DataRatioWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "target training set is {:.3} of the reference set ({} vs {}); expected between 0.05 and 0.2",
            self.ratio, self.target_samples, self.reference_samples
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: HybridModel,
    pub log: TrainLog,
    pub warning: Option<DataRatioWarning>,
}

struct Thresholds {
    patch: f64,
    slide: f64,
}

fn derive_thresholds(
    convnet: &ConvNetParams,
    forest: &ForestModel,
    val: &PatchSet,
    val_slides: &[SlidePatches],
    fallback_slide: f64,
) -> Result<Thresholds, ModelError> {
    let score = |patches: &[RgbImage]| -> Result<Vec<f64>, ModelError> {
        features_of(convnet, patches)?.iter().map(|f| forest.predict_proba(f)).collect()
    };
    let patch = f1_optimal_threshold(&score(&val.patches)?, &val.labels)?;
    let mut s_ic = Vec::with_capacity(val_slides.len());
    for s in val_slides {
        s_ic.push(slide_score(&score(&s.patches)?, patch));
    }
    let labels: Vec<bool> = val_slides.iter().map(|s| s.label).collect();
    let slide = match f1_optimal_threshold(&s_ic, &labels) {
        Ok(t) => t,
        Err(EvalError::SingleClass) | Err(EvalError::Empty) => {
            log::warn!("validation slides lack one class; slide threshold falls back to {fallback_slide}");
            fallback_slide
        }
        Err(e) => return Err(e.into()),
    };
    Ok(Thresholds { patch, slide })
}

#[allow(clippy::too_many_arguments)]
fn fit(
    init: &ConvNetParams,
    train: &PatchSet,
    val: &PatchSet,
    val_slides: &[SlidePatches],
    cfg: &HybridConfig,
    seed: u64,
    provenance: Provenance,
    fallback_slide: f64,
) -> Result<(HybridModel, TrainLog), ModelError> {
    let (convnet, log) = train_cnn(init, train, val, &cfg.train, &cfg.augment, derive_seed(seed, 1))?;
    // the forest sees un-augmented training patches
    let feats = features_of(&convnet, &train.patches)?;
    let forest = train_forest(&feats, &train.labels, &cfg.forest, derive_seed(seed, 2))?;
    let th = derive_thresholds(&convnet, &forest, val, val_slides, fallback_slide)?;
    let model = HybridModel {
        convnet,
        forest,
        patch_threshold: th.patch,
        slide_threshold: th.slide,
        provenance,
        seed,
        train_samples: train.len() as u64,
        forest_config: cfg.forest.clone(),
    };
    Ok((model, log))
}

/// Trains the master model on reference-center data.
pub fn train_master(
    train: &PatchSet,
    val: &PatchSet,
    val_slides: &[SlidePatches],
    cfg: &HybridConfig,
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let init = ConvNetParams::init(cfg.arch.clone(), derive_seed(seed, 0))?;
    let (model, log) = fit(&init, train, val, val_slides, cfg, seed, Provenance::Master, 0.0)?;
    Ok(TrainOutcome { model, log, warning: None })
}

/// Fine-tunes the master backbone on target-center data, refits the forest
/// from scratch and re-derives both thresholds. The master is not modified.
pub fn calibrate(
    master: &HybridModel,
    center: &str,
    train: &PatchSet,
    val: &PatchSet,
    val_slides: &[SlidePatches],
    cfg: &HybridConfig,
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if cfg.arch != *master.convnet.arch() {
        return Err(ModelError::InvalidConfig("calibration architecture differs from the master's".into()));
    }
    let warning = if master.train_samples > 0 {
        let ratio = train.len() as f64 / master.train_samples as f64;
        (!(0.05..=0.2).contains(&ratio)).then(|| DataRatioWarning {
            target_samples: train.len() as u64,
            reference_samples: master.train_samples,
            ratio,
        })
    } else {
        None
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let provenance = Provenance::Calibrated { center: center.to_string() };
    let (model, log) =
        fit(&master.convnet, train, val, val_slides, cfg, seed, provenance, master.slide_threshold)?;
    Ok(TrainOutcome { model, log, warning })
}
