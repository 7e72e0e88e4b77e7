//! Tissue and epithelium masks.
//!
//! Tissue is split from glass with a global Otsu threshold on the x1 level.
//! Epithelium is then found per 256-pixel x2.5 tile: the tile is smoothed
//! so that nuclear texture merges into uniform dark nests, and a second
//! Otsu split over the tile's tissue pixels separates dark epithelium from
//! lighter stroma.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pyramid::{to_grayscale, GrayImage, PyramidError, PyramidImage, Zoom};

#[derive(Debug, thiserror::Error)]
pub enum SegmentationError {
    #[error("histogram has fewer than two distinct values")]
    DegenerateHistogram,
    #[error("smoothing sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Gaussian sigma in x2.5 pixels.
    pub smoothing_sigma: f64,
    /// Side of the x2.5 tissue tiles.
    pub tissue_patch_side: usize,
    /// Minimum tissue coverage for an x2.5 tile to be segmented.
    pub tissue_coverage_min: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { smoothing_sigma: 5.0, tissue_patch_side: 256, tissue_coverage_min: 0.10 }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.smoothing_sigma > 0.0) || !self.smoothing_sigma.is_finite() {
            return Err(SegmentationError::InvalidSigma(self.smoothing_sigma));
        }
        Ok(())
    }
}

/// Foreground bitset at one zoom level.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    zoom: Zoom,
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({} {}x{}, {} set)", self.zoom, self.width, self.height, self.count())
    }
}

impl BinaryMask {
    pub fn empty(zoom: Zoom, width: usize, height: usize) -> Self {
        Self { zoom, width, height, words: vec![0; (width * height).div_ceil(64)] }
    }

    pub fn from_fn(zoom: Zoom, width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(zoom, width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn zoom(&self) -> Zoom {
        self.zoom
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Bounds-checked read; outside the mask is background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        let i = y * self.width + x;
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn fraction(&self) -> f64 {
        if self.width * self.height == 0 {
            return 0.0;
        }
        self.count() as f64 / (self.width * self.height) as f64
    }

    /// Intersection over union with a mask of the same geometry.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += (a & b).count_ones() as usize;
            union += (a | b).count_ones() as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbour lookup of a pixel given in another zoom's grid.
    #[inline]
    pub fn sample_from(&self, zoom: Zoom, x: i64, y: i64) -> bool {
        let num = zoom.base_factor() as i64;
        let den = self.zoom.base_factor() as i64;
        self.get_signed((x * num).div_euclid(den), (y * num).div_euclid(den))
    }

    /// Number of set pixels under a square footprint given in another zoom.
    pub fn coverage(&self, zoom: Zoom, x: i64, y: i64, side: usize) -> usize {
        let mut n = 0;
        for dy in 0..side as i64 {
            for dx in 0..side as i64 {
                n += self.sample_from(zoom, x + dx, y + dy) as usize;
            }
        }
        n
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<(), PyramidError> {
        crate::io::write_bilevel_png(path, self.width, self.height, |x, y| self.get(x, y))
    }
}

/// Otsu's threshold. Pixels `<= t` form class 0. Among thresholds with equal
/// between-class variance the lowest wins.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8, SegmentationError> {
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(SegmentationError::DegenerateHistogram);
    }
    let total: u64 = hist.iter().sum();
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(f64, u8)> = None;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // sigma_b^2 * N^2 = (S*n0 - N*s0)^2 / (n0 * n1)
        let diff = sum as i128 * n0 as i128 - total as i128 * s0 as i128;
        let d = diff as f64;
        let score = d * d / (n0 as f64 * n1 as f64);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, t as u8));
        }
    }
    Ok(best.expect("two distinct values give at least one valid split").1)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing, radius `ceil(3 sigma)`, clamp-to-edge,
/// rounded half-up once at the end.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage, SegmentationError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SegmentationError::InvalidSigma(sigma));
    }
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.as_raw();
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[xx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0u8; w * h];
    let mut col = vec![0.0f64; w];
    for y in 0..h {
        col.iter_mut().for_each(|v| *v = 0.0);
        for (j, &kv) in k.iter().enumerate() {
            let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
            for (c, &t) in col.iter_mut().zip(&tmp[yy * w..(yy + 1) * w]) {
                *c += kv * t;
            }
        }
        for (o, &c) in out[y * w..(y + 1) * w].iter_mut().zip(&col) {
            *o = (c + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(GrayImage::from_raw(w, h, out).expect("sizes match"))
}

/// Global Otsu on the x1 level; the darker class is tissue.
pub fn tissue_mask(pyr: &PyramidImage) -> Result<BinaryMask, SegmentationError> {
    let gray = to_grayscale(&pyr.level_image(Zoom::X1)?);
    let t = otsu_threshold(&gray.histogram())?;
    Ok(BinaryMask::from_fn(Zoom::X1, gray.width(), gray.height(), |x, y| gray.get(x, y) <= t))
}

/// [`tissue_mask`] with blank slides mapped to an empty mask.
pub fn tissue_mask_or_empty(pyr: &PyramidImage) -> Result<BinaryMask, SegmentationError> {
    match tissue_mask(pyr) {
        Err(SegmentationError::DegenerateHistogram) => {
            let (w, h) = pyr.level_dimensions(Zoom::X1)?;
            Ok(BinaryMask::empty(Zoom::X1, w, h))
        }
        other => other,
    }
}

/// Per-tile epithelium segmentation at x2.5.
pub fn epithelium_mask(
    pyr: &PyramidImage,
    tissue: &BinaryMask,
    cfg: &SegmentationConfig,
) -> Result<BinaryMask, SegmentationError> {
    cfg.validate()?;
    let (w, h) = pyr.level_dimensions(Zoom::X2_5)?;
    let side = cfg.tissue_patch_side;
    let tiles: Vec<(usize, usize)> =
        (0..h.div_ceil(side)).flat_map(|r| (0..w.div_ceil(side)).map(move |c| (c * side, r * side))).collect();

    let parts = tiles
        .par_iter()
        .map(|&(x0, y0)| segment_tile(pyr, tissue, cfg, x0, y0, side.min(w - x0), side.min(h - y0)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut mask = BinaryMask::empty(Zoom::X2_5, w, h);
    for ((x0, y0), part) in tiles.into_iter().zip(parts) {
        let Some((tw, bits)) = part else { continue };
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.set(x0 + i % tw, y0 + i / tw, true);
            }
        }
    }
    Ok(mask)
}

fn segment_tile(
    pyr: &PyramidImage,
    tissue: &BinaryMask,
    cfg: &SegmentationConfig,
    x0: usize,
    y0: usize,
    tw: usize,
    th: usize,
) -> Result<Option<(usize, Vec<bool>)>, SegmentationError> {
    let in_tissue: Vec<bool> = (0..tw * th)
        .map(|i| tissue.sample_from(Zoom::X2_5, (x0 + i % tw) as i64, (y0 + i / tw) as i64))
        .collect();
    let covered = in_tissue.iter().filter(|&&b| b).count();
    if covered == 0 || (covered as f64) < cfg.tissue_coverage_min * (tw * th) as f64 {
        return Ok(None);
    }
    let mut gray = to_grayscale(&pyr.read_region(Zoom::X2_5, x0 as i64, y0 as i64, tw, th)?);
    // glass would bleed into the tissue border through the blur; replace it
    // with the tile's mean tissue gray first
    let sum: u64 = gray.as_raw().iter().zip(&in_tissue).filter(|(_, &t)| t).map(|(&v, _)| v as u64).sum();
    let fill = ((2 * sum + covered as u64) / (2 * covered as u64)) as u8;
    for (v, &t) in gray.as_raw_mut().iter_mut().zip(&in_tissue) {
        if !t {
            *v = fill;
        }
    }
    let smooth = gaussian_blur(&gray, cfg.smoothing_sigma)?;
    let mut hist = [0u64; 256];
    for (&v, &t) in smooth.as_raw().iter().zip(&in_tissue) {
        if t {
            hist[v as usize] += 1;
        }
    }
    let t = match otsu_threshold(&hist) {
        Ok(t) => t,
        Err(SegmentationError::DegenerateHistogram) => return Ok(None),
        Err(e) => return Err(e),
    };
    let bits = smooth.as_raw().iter().zip(&in_tissue).map(|(&v, &inside)| inside && v <= t).collect();
    Ok(Some((tw, bits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{build_pyramid, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive textbook Otsu: weights and class means per candidate.
    fn otsu_oracle(hist: &[u64; 256]) -> Option<u8> {
        let total: f64 = hist.iter().map(|&c| c as f64).sum();
        let mut best: Option<(f64, u8)> = None;
        for t in 0..256usize {
            let n0: u64 = hist[..=t].iter().sum();
            let n1: u64 = hist[t + 1..].iter().sum();
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let m0 = hist[..=t].iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / n0 as f64;
            let m1 = hist[t + 1..].iter().enumerate().map(|(i, &c)| (i + t + 1) as f64 * c as f64).sum::<f64>()
                / n1 as f64;
            let (w0, w1) = (n0 as f64 / total, n1 as f64 / total);
            let v = w0 * w1 * (m0 - m1) * (m0 - m1);
            if best.is_none_or(|(b, _)| v > b * (1.0 + 1e-12)) {
                best = Some((v, t as u8));
            }
        }
        best.map(|(_, t)| t)
    }

    #[test]
    fn otsu_degenerate() {
        let mut hist = [0u64; 256];
        hist[128] = 1000;
        assert!(matches!(otsu_threshold(&hist), Err(SegmentationError::DegenerateHistogram)));
        assert!(matches!(otsu_threshold(&[0; 256]), Err(SegmentationError::DegenerateHistogram)));
    }

    #[test]
    fn otsu_two_spikes() {
        let mut hist = [0u64; 256];
        hist[10] = 500;
        hist[200] = 500;
        let t = otsu_threshold(&hist).unwrap();
        assert!((10..200).contains(&t));
        assert_eq!(Some(t), otsu_oracle(&hist));
        // lowest maximizer
        assert_eq!(t, 10);
    }

    #[test]
    fn otsu_two_gaussians() {
        let mut hist = [0u64; 256];
        for (i, h) in hist.iter_mut().enumerate() {
            let g = |mu: f64| (-(i as f64 - mu).powi(2) / (2.0 * 100.0)).exp();
            *h = (1e5 * (g(60.0) + g(180.0))).round() as u64;
        }
        let t = otsu_threshold(&hist).unwrap();
        assert_eq!(Some(t), otsu_oracle(&hist));
        assert!((100..=140).contains(&t), "{t}");
    }

    #[test]
    fn otsu_matches_oracle_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let mut hist = [0u64; 256];
            let k = rng.random_range(2..40);
            for _ in 0..k {
                hist[rng.random_range(0..256)] += rng.random_range(1..10_000);
            }
            assert_eq!(otsu_threshold(&hist).ok(), otsu_oracle(&hist));
        }
    }

    #[test]
    fn blur_uniform_unchanged() {
        let img = GrayImage::filled(20, 17, 93);
        assert_eq!(gaussian_blur(&img, 2.3).unwrap(), img);
    }

    #[test]
    fn blur_impulse_matches_dense_convolution() {
        let n = 15;
        let mut img = GrayImage::new(n, n);
        img.put(7, 7, 255);
        let out = gaussian_blur(&img, 1.0).unwrap();
        // dense 2-D oracle with an explicitly built 2-D kernel
        let r = 3i64;
        let mut k2 = vec![vec![0.0f64; 7]; 7];
        let mut s = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let v = (-((dx * dx + dy * dy) as f64) / 2.0).exp();
                k2[(dy + r) as usize][(dx + r) as usize] = v;
                s += v;
            }
        }
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, n as i64 - 1) as usize;
                        let xx = (x + dx).clamp(0, n as i64 - 1) as usize;
                        acc += k2[(dy + r) as usize][(dx + r) as usize] / s * img.get(xx, yy) as f64;
                    }
                }
                assert_eq!(out.get(x as usize, y as usize), (acc + 0.5).floor() as u8, "at {x},{y}");
            }
        }
        let center = k2[3][3] / s * 255.0;
        assert_eq!(out.get(7, 7), (center + 0.5).floor() as u8);
    }

    #[test]
    fn blur_reduces_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let img = GrayImage::from_fn(40, 30, |_, _| rng.random());
            let out = gaussian_blur(&img, rng.random_range(0.5..4.0)).unwrap();
            assert!(out.variance() <= img.variance());
        }
    }

    #[test]
    fn blur_otsu_commutes_with_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let img = GrayImage::from_fn(32, 32, |x, _| {
                let base = if x < 16 { 70.0 } else { 180.0 };
                (base + rng.random_range(-40.0..40.0f64)).clamp(0.0, 255.0) as u8
            });
            let inv = GrayImage::from_fn(32, 32, |x, y| 255 - img.get(x, y));
            let a = gaussian_blur(&img, 1.7).unwrap();
            let b = gaussian_blur(&inv, 1.7).unwrap();
            let ta = otsu_threshold(&a.histogram()).unwrap();
            let tb = otsu_threshold(&b.histogram()).unwrap();
            for (&va, &vb) in a.as_raw().iter().zip(b.as_raw()) {
                // dark class of the original is the bright class of the inverse
                assert_eq!(va <= ta, vb > tb);
            }
        }
    }

    fn disc_slide(side: usize, radius: f64) -> (PyramidImage, BinaryMask) {
        let c = side as f64 / 2.0;
        let mut base = RgbImage::white(side, side);
        for y in 0..side {
            for x in 0..side {
                let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
                if d < radius {
                    base.put(x, y, [150, 90, 160]);
                }
            }
        }
        let pyr = build_pyramid(&base, 256).unwrap();
        let (w, h) = pyr.level_dimensions(Zoom::X1).unwrap();
        // ground truth disc in x1 pixel centers
        let truth = BinaryMask::from_fn(Zoom::X1, w, h, |x, y| {
            let (px, py) = ((x as f64 + 0.5) * 20.0, (y as f64 + 0.5) * 20.0);
            ((px - c).powi(2) + (py - c).powi(2)).sqrt() < radius
        });
        (pyr, truth)
    }

    #[test]
    fn tissue_mask_finds_disc() {
        let (pyr, truth) = disc_slide(2048, 700.0);
        let mask = tissue_mask(&pyr).unwrap();
        assert!(mask.iou(&truth) >= 0.9, "iou {}", mask.iou(&truth));
        // foreground fraction equals the darker-class histogram mass
        let gray = to_grayscale(&pyr.level_image(Zoom::X1).unwrap());
        let hist = gray.histogram();
        let t = otsu_threshold(&hist).unwrap() as usize;
        let dark: u64 = hist[..=t].iter().sum();
        assert_eq!(mask.count() as u64, dark);
    }

    #[test]
    fn blank_slide_has_no_tissue() {
        let pyr = build_pyramid(&RgbImage::white(1024, 1024), 256).unwrap();
        assert!(matches!(tissue_mask(&pyr), Err(SegmentationError::DegenerateHistogram)));
        let t = tissue_mask_or_empty(&pyr).unwrap();
        assert!(t.is_empty());
        let epi = epithelium_mask(&pyr, &t, &SegmentationConfig::default()).unwrap();
        assert!(epi.is_empty());
        assert_eq!(epi.zoom(), Zoom::X2_5);
    }

    #[test]
    fn epithelium_within_tissue_and_deterministic() {
        let side = 2048;
        let mut base = RgbImage::white(side, side);
        for y in 200..1800usize {
            for x in 200..1800usize {
                let (xi, yi) = (x as i64, y as i64);
                let nest = (xi - 600).pow(2) + (yi - 900).pow(2) < 250 * 250;
                let v = if nest {
                    if (x / 6 + y / 6) % 2 == 0 { [70, 40, 120] } else { [120, 80, 150] }
                } else if (x / 3) % 4 == 0 {
                    [200, 140, 175]
                } else {
                    [210, 155, 185]
                };
                base.put(x, y, v);
            }
        }
        let pyr = build_pyramid(&base, 512).unwrap();
        let tissue = tissue_mask(&pyr).unwrap();
        let cfg = SegmentationConfig::default();
        let epi = epithelium_mask(&pyr, &tissue, &cfg).unwrap();
        assert_eq!(epi, epithelium_mask(&pyr, &tissue, &cfg).unwrap());
        let (w, h) = (epi.width(), epi.height());
        let mut nest_px = 0;
        let mut hit = 0;
        for y in 0..h {
            for x in 0..w {
                if epi.get(x, y) {
                    assert!(tissue.sample_from(Zoom::X2_5, x as i64, y as i64));
                }
                let (bx, by) = ((x * 8 + 4) as i64, (y * 8 + 4) as i64);
                if (bx - 600).pow(2) + (by - 900).pow(2) < 230 * 230 {
                    nest_px += 1;
                    hit += epi.get(x, y) as usize;
                }
            }
        }
        assert!(hit as f64 / nest_px as f64 >= 0.8, "recall {}", hit as f64 / nest_px as f64);
    }
}
