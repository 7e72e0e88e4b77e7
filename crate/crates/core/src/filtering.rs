//! Discard cascade for x20 candidate patches.
//!
//! Candidates are the non-overlapping 256-pixel x20 patches whose footprint
//! is sufficiently covered by epithelium. Each one then goes through three
//! filters in a fixed order (nuclei, blur, tissue) and keeps the first
//! reason it fails, if any.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pyramid::{to_grayscale, DiscardReason, GrayImage, PatchRef, PatchStatus, PyramidError, PyramidImage, RgbImage, Zoom};
use crate::segmentation::BinaryMask;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("patch must be at least 3x3 for the laplacian, got {0}x{1}")]
    PatchTooSmall(usize, usize),
    #[error("nuclei detector failed: {0}")]
    Detector(#[from] DetectorError),
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct DetectorError(pub String);

/// Pluggable nuclei presence classifier.
pub trait NucleiDetector: Send + Sync {
    fn contains_nuclei(&self, patch: &RgbImage) -> Result<bool, DetectorError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Laplacian variance below which a patch is blurry (0-255 gray scale).
    pub blur_variance_min: f64,
    /// Gray-level distance to the modal value counted as background.
    pub thres_1: u32,
    /// Background proportion above which a patch is discarded.
    pub thres_2: f64,
    /// Minimum fraction of dark blue-dominant pixels for the nuclei heuristic.
    pub nuclei_min_fraction: f64,
    /// Gray level under which a pixel counts as dark.
    pub nuclei_dark_cutoff: u8,
    /// Minimum epithelium coverage of an x20 candidate footprint.
    pub epithelium_coverage_min: f64,
    /// x20 patch side in pixels.
    pub patch_side: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            blur_variance_min: 50.0,
            thres_1: 25,
            thres_2: 0.9,
            nuclei_min_fraction: 0.05,
            nuclei_dark_cutoff: 120,
            epithelium_coverage_min: 0.25,
            patch_side: 256,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.thres_2 > 0.0 && self.thres_2 <= 1.0) {
            return Err(FilterError::InvalidConfig(format!("thres_2 must be in (0, 1], got {}", self.thres_2)));
        }
        if !(0.0..=1.0).contains(&self.nuclei_min_fraction) {
            return Err(FilterError::InvalidConfig("nuclei_min_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.epithelium_coverage_min) {
            return Err(FilterError::InvalidConfig("epithelium_coverage_min must be in [0, 1]".into()));
        }
        if self.patch_side == 0 || self.patch_side % 8 != 0 {
            return Err(FilterError::InvalidConfig("patch_side must be a positive multiple of 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Discard(DiscardReason),
}

impl FilterDecision {
    pub fn is_keep(self) -> bool {
        self == FilterDecision::Keep
    }
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(patch: &GrayImage) -> Result<f64, FilterError> {
    let (w, h) = (patch.width(), patch.height());
    if w < 3 || h < 3 {
        return Err(FilterError::PatchTooSmall(w, h));
    }
    let p = patch.as_raw();
    let (mut s, mut s2) = (0i64, 0i128);
    for y in 1..h - 1 {
        let (up, mid, down) = (&p[(y - 1) * w..y * w], &p[y * w..(y + 1) * w], &p[(y + 1) * w..(y + 2) * w]);
        for x in 1..w - 1 {
            let r = up[x] as i64 + down[x] as i64 + mid[x - 1] as i64 + mid[x + 1] as i64 - 4 * mid[x] as i64;
            s += r;
            s2 += (r * r) as i128;
        }
    }
    let n = ((w - 2) * (h - 2)) as i128;
    // n * sum(r^2) - sum(r)^2, exact
    let num = n * s2 - (s as i128) * (s as i128);
    Ok(num as f64 / (n * n) as f64)
}

pub fn blur_filter(patch: &GrayImage, cfg: &FilterConfig) -> Result<FilterDecision, FilterError> {
    Ok(if laplacian_variance(patch)? < cfg.blur_variance_min {
        FilterDecision::Discard(DiscardReason::Blurry)
    } else {
        FilterDecision::Keep
    })
}

/// Background test: share of pixels within `thres_1` of the modal gray value.
pub fn tissue_fraction_filter(patch: &GrayImage, cfg: &FilterConfig) -> FilterDecision {
    let hist = patch.histogram();
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return FilterDecision::Discard(DiscardReason::InsufficientTissue);
    }
    // max_by_key keeps the last maximum; scan in reverse so ties go to the smallest value
    let (val, _) = hist.iter().enumerate().rev().max_by_key(|&(_, &c)| c).expect("256 bins");
    let near: u64 = hist
        .iter()
        .enumerate()
        .filter(|&(i, _)| (val as i64 - i as i64).unsigned_abs() < cfg.thres_1 as u64)
        .map(|(_, &c)| c)
        .sum();
    if near as f64 / total as f64 > cfg.thres_2 {
        FilterDecision::Discard(DiscardReason::InsufficientTissue)
    } else {
        FilterDecision::Keep
    }
}

/// Fraction of pixels that are dark and not red-dominant.
pub fn dark_blue_fraction(patch: &RgbImage, dark_cutoff: u8) -> f64 {
    let n = patch.width() * patch.height();
    if n == 0 {
        return 0.0;
    }
    let hits = patch.pixels().filter(|&p| crate::pyramid::luma(p) < dark_cutoff && p[2] >= p[0]).count();
    hits as f64 / n as f64
}

pub fn nuclei_filter(
    patch: &RgbImage,
    cfg: &FilterConfig,
    detector: Option<&dyn NucleiDetector>,
) -> Result<FilterDecision, FilterError> {
    let has_nuclei = match detector {
        Some(d) => d.contains_nuclei(patch)?,
        None => dark_blue_fraction(patch, cfg.nuclei_dark_cutoff) >= cfg.nuclei_min_fraction,
    };
    Ok(if has_nuclei { FilterDecision::Keep } else { FilterDecision::Discard(DiscardReason::NoNuclei) })
}

/// Milliseconds spent per filter, summed over patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMillis {
    pub read: f64,
    pub nuclei: f64,
    pub blur: f64,
    pub tissue: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// x20 grid positions inspected.
    pub grid_patches: usize,
    /// Grid patches whose footprint touches tissue.
    pub tissue_candidates: usize,
    /// Patches entering the cascade.
    pub total: usize,
    pub retained: usize,
    pub no_nuclei: usize,
    pub blurry: usize,
    pub insufficient_tissue: usize,
    pub stage_ms: StageMillis,
    /// Wall time of the whole filtering call.
    pub wall_ms: f64,
}

impl FilterReport {
    pub fn reconciles(&self) -> bool {
        self.no_nuclei + self.blurry + self.insufficient_tissue + self.retained == self.total
    }

    fn count(&mut self, status: PatchStatus) {
        self.total += 1;
        match status {
            PatchStatus::Retained => self.retained += 1,
            PatchStatus::Discarded(DiscardReason::NoNuclei) => self.no_nuclei += 1,
            PatchStatus::Discarded(DiscardReason::Blurry) => self.blurry += 1,
            PatchStatus::Discarded(DiscardReason::InsufficientTissue) => self.insufficient_tissue += 1,
            PatchStatus::Candidate => unreachable!("cascade always assigns a status"),
        }
    }

    /// Associative combination of two reports.
    pub fn merge(&mut self, other: &FilterReport) {
        self.grid_patches += other.grid_patches;
        self.tissue_candidates += other.tissue_candidates;
        self.total += other.total;
        self.retained += other.retained;
        self.no_nuclei += other.no_nuclei;
        self.blurry += other.blurry;
        self.insufficient_tissue += other.insufficient_tissue;
        self.stage_ms.read += other.stage_ms.read;
        self.stage_ms.nuclei += other.stage_ms.nuclei;
        self.stage_ms.blur += other.stage_ms.blur;
        self.stage_ms.tissue += other.stage_ms.tissue;
        self.wall_ms += other.wall_ms;
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn classify(
    pyr: &PyramidImage,
    p: &PatchRef,
    cfg: &FilterConfig,
    detector: Option<&dyn NucleiDetector>,
) -> Result<(PatchStatus, StageMillis), FilterError> {
    let mut ms = StageMillis::default();
    let t = Instant::now();
    let rgb = pyr.read_region(p.zoom, p.x, p.y, p.side, p.side)?;
    ms.read = ms_since(t);

    let t = Instant::now();
    let d = nuclei_filter(&rgb, cfg, detector)?;
    ms.nuclei = ms_since(t);
    if let FilterDecision::Discard(r) = d {
        return Ok((PatchStatus::Discarded(r), ms));
    }

    let t = Instant::now();
    let gray = to_grayscale(&rgb);
    let d = blur_filter(&gray, cfg)?;
    ms.blur = ms_since(t);
    if let FilterDecision::Discard(r) = d {
        return Ok((PatchStatus::Discarded(r), ms));
    }

    let t = Instant::now();
    let d = tissue_fraction_filter(&gray, cfg);
    ms.tissue = ms_since(t);
    Ok(match d {
        FilterDecision::Keep => (PatchStatus::Retained, ms),
        FilterDecision::Discard(r) => (PatchStatus::Discarded(r), ms),
    })
}

/// Runs the cascade on explicit candidates, preserving their order.
pub fn run_cascade(
    pyr: &PyramidImage,
    candidates: &[PatchRef],
    cfg: &FilterConfig,
    detector: Option<&dyn NucleiDetector>,
) -> Result<(Vec<PatchRef>, FilterReport), FilterError> {
    cfg.validate()?;
    let start = Instant::now();
    let results = candidates
        .par_iter()
        .map(|p| classify(pyr, p, cfg, detector))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = FilterReport::default();
    let mut out = Vec::with_capacity(candidates.len());
    for (p, (status, ms)) in candidates.iter().zip(results) {
        report.count(status);
        report.stage_ms.read += ms.read;
        report.stage_ms.nuclei += ms.nuclei;
        report.stage_ms.blur += ms.blur;
        report.stage_ms.tissue += ms.tissue;
        out.push(p.with_status(status));
    }
    report.wall_ms = ms_since(start);
    Ok((out, report))
}

/// Everything `filter_patches` decided, in row-major grid order.
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub patches: Vec<PatchRef>,
    pub report: FilterReport,
}

impl FilterOutcome {
    pub fn retained(&self) -> Vec<PatchRef> {
        self.patches.iter().copied().filter(|p| p.status == PatchStatus::Retained).collect()
    }
}

/// Enumerates x20 candidates gated by epithelium coverage and filters them.
pub fn filter_patches(
    pyr: &PyramidImage,
    tissue: &BinaryMask,
    epithelium: &BinaryMask,
    cfg: &FilterConfig,
    detector: Option<&dyn NucleiDetector>,
) -> Result<FilterOutcome, FilterError> {
    cfg.validate()?;
    let start = Instant::now();
    let (w, h) = pyr.level_dimensions(Zoom::X20)?;
    let side = cfg.patch_side;
    // footprint of one x20 patch at x2.5
    let fp = side / 8;
    let needed = cfg.epithelium_coverage_min * (fp * fp) as f64;
    let mut grid = 0;
    let mut tissue_candidates = 0;
    let mut candidates = Vec::new();
    for row in 0..h.div_ceil(side) {
        for col in 0..w.div_ceil(side) {
            grid += 1;
            let (x, y) = ((col * side) as i64, (row * side) as i64);
            let (fx, fy) = (x / 8, y / 8);
            if tissue.coverage(Zoom::X2_5, fx, fy, fp) > 0 {
                tissue_candidates += 1;
            }
            let epi = epithelium.coverage(Zoom::X2_5, fx, fy, fp);
            if epi > 0 && epi as f64 >= needed {
                candidates.push(PatchRef::new(Zoom::X20, x, y, side));
            }
        }
    }
    let (patches, mut report) = run_cascade(pyr, &candidates, cfg, detector)?;
    report.grid_patches = grid;
    report.tissue_candidates = tissue_candidates;
    report.wall_ms = ms_since(start);
    Ok(FilterOutcome { patches, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::build_pyramid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense oracle: explicit kernel convolution and two-pass variance.
    fn laplacian_oracle(img: &GrayImage) -> f64 {
        let k = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
        let mut resp = Vec::new();
        for y in 1..img.height() - 1 {
            for x in 1..img.width() - 1 {
                let mut acc = 0.0;
                for (dy, krow) in k.iter().enumerate() {
                    for (dx, kv) in krow.iter().enumerate() {
                        acc += kv * img.get(x + dx - 1, y + dy - 1) as f64;
                    }
                }
                resp.push(acc);
            }
        }
        let mean = resp.iter().sum::<f64>() / resp.len() as f64;
        resp.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resp.len() as f64
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(laplacian_variance(&GrayImage::filled(10, 10, 77)).unwrap(), 0.0);
        let ramp = GrayImage::from_fn(20, 9, |x, _| x as u8);
        assert_eq!(laplacian_variance(&ramp).unwrap(), 0.0);
        let checker = GrayImage::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
        let v = laplacian_variance(&checker).unwrap();
        assert_eq!(v, laplacian_oracle(&checker));
        assert_eq!(v, 1_040_400.0);
        assert!(matches!(laplacian_variance(&GrayImage::new(2, 5)), Err(FilterError::PatchTooSmall(2, 5))));
    }

    #[test]
    fn laplacian_matches_oracle_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let img = GrayImage::from_fn(rng.random_range(3..30), rng.random_range(3..30), |_, _| rng.random());
            let (a, b) = (laplacian_variance(&img).unwrap(), laplacian_oracle(&img));
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn blur_filter_decisions() {
        let cfg = FilterConfig::default();
        assert_eq!(
            blur_filter(&GrayImage::filled(8, 8, 3), &cfg).unwrap(),
            FilterDecision::Discard(DiscardReason::Blurry)
        );
        let checker = GrayImage::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
        assert!(blur_filter(&checker, &cfg).unwrap().is_keep());
    }

    #[test]
    fn smoothing_lowers_laplacian_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let img = GrayImage::from_fn(64, 64, |_, _| rng.random());
            let smooth = crate::segmentation::gaussian_blur(&img, 8.0).unwrap();
            assert!(laplacian_variance(&smooth).unwrap() < laplacian_variance(&img).unwrap());
        }
    }

    #[test]
    fn tissue_fraction_examples() {
        let cfg = FilterConfig::default();
        let white = GrayImage::filled(10, 10, 255);
        assert_eq!(tissue_fraction_filter(&white, &cfg), FilterDecision::Discard(DiscardReason::InsufficientTissue));
        let mixed = GrayImage::from_fn(10, 10, |x, _| if x < 6 { 255 } else { 80 });
        assert!(tissue_fraction_filter(&mixed, &cfg).is_keep());
        let mostly = GrayImage::from_fn(20, 10, |x, y| if y * 20 + x < 190 { 240 } else { 50 });
        assert_eq!(tissue_fraction_filter(&mostly, &cfg), FilterDecision::Discard(DiscardReason::InsufficientTissue));
    }

    #[test]
    fn tissue_fraction_mode_ties_take_smallest() {
        // 50 at 100, 50 at 200: mode is 100, 50% near it -> keep;
        // with thres_2 = 0.4 the smaller mode decides and it is discarded
        let img = GrayImage::from_fn(10, 10, |x, _| if x < 5 { 200 } else { 100 });
        let cfg = FilterConfig { thres_2: 0.4, thres_1: 1, ..Default::default() };
        assert!(!tissue_fraction_filter(&img, &cfg).is_keep());
    }

    #[test]
    fn nuclei_examples() {
        let cfg = FilterConfig::default();
        let white = RgbImage::white(20, 20);
        assert_eq!(nuclei_filter(&white, &cfg, None).unwrap(), FilterDecision::Discard(DiscardReason::NoNuclei));
        let mut img = RgbImage::white(10, 10);
        for i in 0..20 {
            img.put(i % 10, i / 10, [40, 30, 110]);
        }
        assert!(nuclei_filter(&img, &cfg, None).unwrap().is_keep());

        struct Always;
        impl NucleiDetector for Always {
            fn contains_nuclei(&self, _: &RgbImage) -> Result<bool, DetectorError> {
                Ok(true)
            }
        }
        assert!(nuclei_filter(&white, &cfg, Some(&Always)).unwrap().is_keep());

        struct Broken;
        impl NucleiDetector for Broken {
            fn contains_nuclei(&self, _: &RgbImage) -> Result<bool, DetectorError> {
                Err(DetectorError("model missing".into()))
            }
        }
        assert!(matches!(nuclei_filter(&white, &cfg, Some(&Broken)), Err(FilterError::Detector(_))));
    }

    #[test]
    fn blank_slide_yields_nothing() {
        let pyr = build_pyramid(&RgbImage::white(1024, 1024), 256).unwrap();
        let tissue = crate::segmentation::tissue_mask_or_empty(&pyr).unwrap();
        let epi = BinaryMask::empty(Zoom::X2_5, 128, 128);
        let out = filter_patches(&pyr, &tissue, &epi, &FilterConfig::default(), None).unwrap();
        assert!(out.retained().is_empty());
        assert_eq!(out.report.total, 0);
        assert!(out.report.reconciles());
    }

    #[test]
    fn cascade_order_and_reconciliation() {
        // left half: dark textured nuclei; right half: white
        let mut base = RgbImage::white(1024, 512);
        for y in 0..512 {
            for x in 0..512 {
                let v = if (x / 3 + y / 5) % 3 == 0 { [60, 40, 120] } else { [200, 140, 180] };
                base.put(x, y, v);
            }
        }
        let pyr = build_pyramid(&base, 256).unwrap();
        let full = BinaryMask::from_fn(Zoom::X2_5, 128, 64, |_, _| true);
        let out = filter_patches(&pyr, &full, &full, &FilterConfig::default(), None).unwrap();
        assert_eq!(out.report.total, 8);
        assert!(out.report.reconciles());
        assert_eq!(out.report.retained, 4);
        assert_eq!(out.report.no_nuclei, 4);
        let xs: Vec<_> = out.retained().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(xs, vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
    }
}
