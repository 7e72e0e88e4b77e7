//! Slide-level orchestration: segmentation, filtering, context-patch
//! scoring, slide score and heatmap.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{confusion_at, slide_score, Class, EvalError, EvalLevel, MetricsReport};
use crate::filtering::{filter_patches, FilterConfig, FilterError, FilterReport, NucleiDetector};
use crate::model::{HybridModel, ModelError, PatchSet};
use crate::pyramid::{PatchRef, PyramidError, PyramidImage, RgbImage, Zoom};
use crate::segmentation::{epithelium_mask, tissue_mask_or_empty, SegmentationConfig, SegmentationError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("patch must be a 256px x20 patch, got side {side} at x{zoom}")]
    NotAnX20Patch { zoom: String, side: usize },
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub segmentation: SegmentationConfig,
    pub filter: FilterConfig,
}

/// Anything that maps an x5 context patch to an IC score in `[0, 1]`.
pub trait PatchScorer: Sync {
    fn score(&self, context: &RgbImage) -> Result<f64, ModelError>;
    fn patch_threshold(&self) -> f64;
    fn slide_threshold(&self) -> f64;
}

impl PatchScorer for HybridModel {
    fn score(&self, context: &RgbImage) -> Result<f64, ModelError> {
        self.predict_context(context)
    }

    fn patch_threshold(&self) -> f64 {
        self.patch_threshold
    }

    fn slide_threshold(&self) -> f64 {
        self.slide_threshold
    }
}

/// x5 patch of the same pixel size and center as an x20 patch.
pub fn extract_context_patch(pyr: &PyramidImage, patch: &PatchRef) -> Result<RgbImage, PipelineError> {
    if patch.zoom != Zoom::X20 {
        return Err(PipelineError::NotAnX20Patch { zoom: patch.zoom.label().into(), side: patch.side });
    }
    let (cx, cy) = patch.base_center();
    let half = (patch.side / 2) as i64;
    let f = Zoom::X5.base_factor() as i64;
    let (x, y) = (cx.div_euclid(f) - half, cy.div_euclid(f) - half);
    Ok(pyr.read_region(Zoom::X5, x, y, patch.side, patch.side)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub x: i64,
    pub y: i64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlideTimings {
    pub segmentation_ms: f64,
    pub filter_ms: f64,
    pub inference_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide_id: String,
    pub s_ic: f64,
    pub class: Class,
    /// Retained epithelial patches; every one of them is scored.
    pub n: usize,
    /// Side of the scored x20 patches.
    pub patch_side: usize,
    pub p0: f64,
    pub slide_threshold: f64,
    /// Set when the slide has no epithelium to analyze.
    pub no_epithelium: bool,
    /// Context patches read by the inference stage.
    pub inference_accesses: usize,
    pub patches: Vec<PatchScore>,
    pub timings: SlideTimings,
    pub filter_report: FilterReport,
}

impl SlideResult {
    pub fn scores(&self) -> Vec<f64> {
        self.patches.iter().map(|p| p.score).collect()
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings = SlideTimings::default();
        r.filter_report.stage_ms = Default::default();
        r.filter_report.wall_ms = 0.0;
        r
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the full pipeline on one slide.
pub fn score_slide(
    slide_id: &str,
    pyr: &PyramidImage,
    scorer: &dyn PatchScorer,
    cfg: &PipelineConfig,
    detector: Option<&dyn NucleiDetector>,
) -> Result<SlideResult, PipelineError> {
    let start = Instant::now();
    let tissue = tissue_mask_or_empty(pyr)?;
    let epi = epithelium_mask(pyr, &tissue, &cfg.segmentation)?;
    let segmentation_ms = ms_since(start);

    let t = Instant::now();
    let outcome = filter_patches(pyr, &tissue, &epi, &cfg.filter, detector)?;
    let filter_ms = ms_since(t);
    let retained = outcome.retained();

    let t = Instant::now();
    let accesses = AtomicUsize::new(0);
    let scores = retained
        .par_iter()
        .map(|p| {
            accesses.fetch_add(1, Ordering::Relaxed);
            let ctx = extract_context_patch(pyr, p)?;
            Ok(scorer.score(&ctx)?)
        })
        .collect::<Result<Vec<f64>, PipelineError>>()?;
    let inference_ms = ms_since(t);

    let p0 = scorer.patch_threshold();
    let s_ic = slide_score(&scores, p0);
    let slide_threshold = scorer.slide_threshold();
    let result = SlideResult {
        slide_id: slide_id.to_string(),
        s_ic,
        class: Class::from_positive(s_ic > slide_threshold),
        n: retained.len(),
        patch_side: cfg.filter.patch_side,
        p0,
        slide_threshold,
        no_epithelium: epi.is_empty(),
        inference_accesses: accesses.into_inner(),
        patches: retained.iter().zip(&scores).map(|(p, &score)| PatchScore { x: p.x, y: p.y, score }).collect(),
        timings: SlideTimings { segmentation_ms, filter_ms, inference_ms, total_ms: ms_since(start) },
        filter_report: outcome.report,
    };
    Ok(result)
}

/// Blue-to-red table: entry `i` is `(i, 0, 255 - i)`.
pub const COLORMAP: [[u8; 3]; 256] = {
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = [i as u8, 0, 255 - i as u8];
        i += 1;
    }
    t
};

/// Alpha of painted heatmap pixels (half opacity, rounded up).
pub const HEATMAP_ALPHA: u8 = 128;

/// Colormap entry for a score: index `round(score * 255)`, half up.
pub fn score_color(score: f64) -> [u8; 3] {
    COLORMAP[(score.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as usize]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Heatmap {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let i = 4 * (y * self.width + x);
        self.rgba[i..i + 4].try_into().expect("4 channels")
    }

    pub fn save_png(&self, path: &Path) -> Result<(), PyramidError> {
        crate::io::write_rgba_png(path, self.width, self.height, &self.rgba)
    }
}

/// Paints each scored x20 patch over its x2.5 footprint; the rest is transparent.
pub fn render_heatmap(result: &SlideResult, pyr: &PyramidImage) -> Result<Heatmap, PipelineError> {
    let (w, h) = pyr.level_dimensions(Zoom::X2_5)?;
    let f = (Zoom::X2_5.base_factor() / Zoom::X20.base_factor()) as i64;
    let fp = result.patch_side.div_ceil(f as usize);
    let mut rgba = vec![0u8; w * h * 4];
    for p in &result.patches {
        let [r, g, b] = score_color(p.score);
        let (x0, y0) = (p.x / f, p.y / f);
        for y in y0.max(0)..(y0 + fp as i64).min(h as i64) {
            for x in x0.max(0)..(x0 + fp as i64).min(w as i64) {
                let i = 4 * (y as usize * w + x as usize);
                rgba[i..i + 4].copy_from_slice(&[r, g, b, HEATMAP_ALPHA]);
            }
        }
    }
    Ok(Heatmap { width: w, height: h, rgba })
}

/// Patch-level report: `score > P0` is IC.
pub fn evaluate_patches(model: &HybridModel, set: &PatchSet, center: &str) -> Result<MetricsReport, PipelineError> {
    let scores = model.predict_many(&set.patches)?;
    let labels: Vec<Class> = set.labels.iter().map(|&l| Class::from_positive(l)).collect();
    let counts = confusion_at(&scores, &labels, model.patch_threshold)?;
    Ok(MetricsReport::new(EvalLevel::Patch, center, model.patch_threshold, counts))
}

/// Slide-level report over scored slides and their true labels.
pub fn evaluate_slides(results: &[SlideResult], labels: &[bool], center: &str) -> Result<MetricsReport, PipelineError> {
    let threshold = results.first().map(|r| r.slide_threshold).unwrap_or(0.0);
    let preds: Vec<Class> = results.iter().map(|r| r.class).collect();
    let truth: Vec<Class> = labels.iter().map(|&l| Class::from_positive(l)).collect();
    let counts = crate::evaluation::confusion(&preds, &truth)?;
    Ok(MetricsReport::new(EvalLevel::Slide, center, threshold, counts))
}
