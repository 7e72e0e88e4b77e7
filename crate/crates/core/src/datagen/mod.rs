//! Synthetic slides with ground-truth annotations, per-center stain
//! profiles, and labeled patch datasets built through the filter cascade.

pub mod dataset;
pub mod geometry;
pub mod profile;
pub mod render;
pub mod slide;

pub use dataset::{
    build_patch_dataset, extract_slide_patches, generate_dataset, default_grouping, DatasetConfig, DatasetManifest,
    ExtractConfig, PatchDataset, PatientEntry, SlideEntry, SlidePatchData, MANIFEST_VERSION,
};
pub use geometry::Polygon;
pub use profile::{apply_center_shift, hue_difference, mean_hue, CenterProfile, ProfileDelta};
pub use render::RegionMap;
pub use slide::{generate_slide, label_at, Annotation, GeneratedSlide, SlideLayout, BENIGN_LABEL, IC_LABELS, STROMA_LABEL};

use crate::evaluation::EvalError;
use crate::filtering::FilterError;
use crate::model::ModelError;
use crate::pipeline::PipelineError;
use crate::pyramid::PyramidError;
use crate::segmentation::SegmentationError;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("fractions must lie in [0, 1] with ic <= epithelium (epithelium {epithelium}, ic {ic})")]
    InvalidFractions { epithelium: f64, ic: f64 },
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("label {0:?} has no IC/Rest grouping")]
    UngroupedLabel(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
