//! Mini-batch training of the convnet with Adam and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::augment::{augment, AugmentConfig};
use super::convnet::{loss_and_gradients, mean_loss, ConvNetParams, PatchTensor};
use super::forest::derive_seed;
use super::ModelError;
use crate::pyramid::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, max_epochs: 100, patience: 5, min_delta: 1e-4, learning_rate: 0.001 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(ModelError::InvalidConfig("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.min_delta >= 0.0) {
            return Err(ModelError::InvalidConfig("learning_rate and min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Square patches at the model input side with binary IC labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<RgbImage>,
    pub labels: Vec<bool>,
}

impl PatchSet {
    pub fn new(patches: Vec<RgbImage>, labels: Vec<bool>) -> Result<Self, ModelError> {
        if patches.len() != labels.len() {
            return Err(ModelError::ShapeMismatch("patches and labels differ in length".into()));
        }
        Ok(Self { patches, labels })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn push(&mut self, patch: RgbImage, label: bool) {
        self.patches.push(patch);
        self.labels.push(label);
    }

    fn require_both_classes(&self, which: &'static str) -> Result<(), ModelError> {
        let pos = self.positives();
        if pos == 0 || pos == self.len() {
            return Err(ModelError::EmptyClass(which));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Result<Vec<PatchTensor>, ModelError> {
        self.patches.par_iter().map(PatchTensor::from_image).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean loss over a tensor set, evaluated in fixed-size chunks.
pub fn dataset_loss(params: &ConvNetParams, tensors: &[PatchTensor], labels: &[bool]) -> Result<f64, ModelError> {
    if tensors.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut total = 0.0;
    for (x, y) in tensors.chunks(256).zip(labels.chunks(256)) {
        total += mean_loss(params, x, y)? * x.len() as f64;
    }
    Ok(total / tensors.len() as f64)
}

/// Trains from `init`; returns the parameters of the best validation epoch.
///
/// Epoch `e` shuffles with a stream derived from `(seed, e)`, and sample `i`
/// of that epoch augments with a stream derived from `(seed, e, i)`, so the
/// trajectory does not depend on the number of worker threads.
pub fn train_cnn(
    init: &ConvNetParams,
    train: &PatchSet,
    val: &PatchSet,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<(ConvNetParams, TrainLog), ModelError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    train.require_both_classes("training")?;
    val.require_both_classes("validation")?;
    let val_x = val.tensors()?;

    let mut params = init.clone();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut wait = 0;
    let mut log = TrainLog { epochs: Vec::new(), best_epoch: 0, best_val_loss: f64::INFINITY, stopped_early: false };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = derive_seed(seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<PatchTensor> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, i as u64));
                    PatchTensor::from_image(&augment(&train.patches[i], aug, &mut rng))
                })
                .collect::<Result<_, _>>()?;
            let ys: Vec<bool> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad) = loss_and_gradients(&params, &xs, &ys)?;
            loss_sum += loss * batch.len() as f64;
            adam.step(params.values_mut(), &grad)?;
        }
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let val_loss = dataset_loss(&params, &val_x, &val.labels)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        log.epochs.push(EpochLog { epoch, train_loss, val_loss });
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, params.clone(), epoch);
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_epoch = best.2;
    log.best_val_loss = best.0;
    Ok((best.1, log))
}
