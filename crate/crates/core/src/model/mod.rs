//! Hybrid classifier: convnet backbone, random forest on pooled features,
//! and the master training and calibration procedures.

pub mod adam;
pub mod augment;
pub mod convnet;
pub mod forest;
pub mod format;
pub mod gradcheck;
pub mod hybrid;
pub mod loss;
pub mod train;

pub use adam::AdamState;
pub use augment::{augment, AugmentConfig};
pub use convnet::{
    activation_pattern,
    extract_features, forward, loss_and_gradients, mean_loss, ArchConfig, ConvNetParams, ForwardOutput, ParamSlot,
    PatchTensor,
};
pub use format::{MAGIC, MODEL_FORMAT_VERSION};
pub use forest::{train_forest, ForestConfig, ForestModel, Node, Tree};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use hybrid::{
    calibrate, prepare_input, train_master, DataRatioWarning, HybridConfig, HybridModel, Provenance, SlidePatches,
    TrainOutcome,
};
pub use loss::{bce_loss, bce_with_logit, sigmoid};
pub use train::{dataset_loss, train_cnn, EpochLog, PatchSet, TrainConfig, TrainLog};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameter value")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty input")]
    EmptyInput,
    #[error("{0} split lacks one of the two classes")]
    EmptyClass(&'static str),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
}
