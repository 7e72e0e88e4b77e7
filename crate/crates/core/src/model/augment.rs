//! Training-time patch augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pyramid::RgbImage;

/// Each enabled transform fires with probability 0.5; its parameter is drawn
/// uniformly from the configured `[lo, hi]` range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Quarter turns of 90, 180 or 270 degrees.
    pub rotate: bool,
    pub noise: bool,
    /// Gaussian noise sigma in gray levels.
    pub noise_sigma: [f64; 2],
    pub hue: bool,
    /// Hue shift in turns.
    pub hue_shift: [f64; 2],
    pub saturation: bool,
    pub saturation_scale: [f64; 2],
    pub contrast: bool,
    pub contrast_scale: [f64; 2],
    pub brightness: bool,
    /// Additive offset in gray levels.
    pub brightness_offset: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_horizontal: true,
            flip_vertical: true,
            rotate: true,
            noise: true,
            noise_sigma: [0.0, 10.0],
            hue: true,
            hue_shift: [-0.05, 0.05],
            saturation: true,
            saturation_scale: [0.8, 1.2],
            contrast: true,
            contrast_scale: [0.8, 1.2],
            brightness: true,
            brightness_offset: [-20.0, 20.0],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            rotate: false,
            noise: false,
            hue: false,
            saturation: false,
            contrast: false,
            brightness: false,
            ..Self::default()
        }
    }
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.put(w - 1 - x, y, img.get(x, y));
        }
    }
    out
}

pub fn flip_vertical(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        out.as_raw_mut()[(h - 1 - y) * w * 3..(h - y) * w * 3].copy_from_slice(img.row(y));
    }
    out
}

/// Clockwise rotation by `quarter_turns * 90` degrees.
pub fn rotate90(img: &RgbImage, quarter_turns: u32) -> RgbImage {
    let mut cur = img.clone();
    for _ in 0..quarter_turns % 4 {
        let (w, h) = (cur.width(), cur.height());
        let mut out = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.put(h - 1 - y, x, cur.get(x, y));
            }
        }
        cur = out;
    }
    cur
}

pub(crate) fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn draw(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Applies the enabled transforms in a fixed order: geometry first, then
/// hue, saturation, contrast, brightness and noise. Output keeps the input
/// dimensions; channels are clamped to `[0, 255]`.
pub fn augment(patch: &RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbImage {
    let mut img = patch.clone();
    if cfg.flip_horizontal && rng.random_bool(0.5) {
        img = flip_horizontal(&img);
    }
    if cfg.flip_vertical && rng.random_bool(0.5) {
        img = flip_vertical(&img);
    }
    if cfg.rotate && rng.random_bool(0.5) {
        let turns = rng.random_range(1..=3u32);
        // quarter turns would swap the sides of a non-square patch
        if img.width() == img.height() || turns == 2 {
            img = rotate90(&img, turns);
        }
    }

    let hue = (cfg.hue && rng.random_bool(0.5)).then(|| draw(rng, cfg.hue_shift));
    let sat = (cfg.saturation && rng.random_bool(0.5)).then(|| draw(rng, cfg.saturation_scale));
    let contrast = (cfg.contrast && rng.random_bool(0.5)).then(|| draw(rng, cfg.contrast_scale));
    let bright = (cfg.brightness && rng.random_bool(0.5)).then(|| draw(rng, cfg.brightness_offset));
    let noise = (cfg.noise && rng.random_bool(0.5)).then(|| draw(rng, cfg.noise_sigma));
    if hue.is_none() && sat.is_none() && contrast.is_none() && bright.is_none() && noise.is_none_or(|s| s <= 0.0) {
        return img;
    }

    let mut px: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    if hue.is_some() || sat.is_some() {
        let (dh, ks) = (hue.unwrap_or(0.0), sat.unwrap_or(1.0));
        for p in px.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
            let (r, g, b) = hsv_to_rgb(h + dh, (s * ks).clamp(0.0, 1.0), v);
            p.copy_from_slice(&[r * 255.0, g * 255.0, b * 255.0]);
        }
    }
    if let Some(k) = contrast {
        let n = (px.len() / 3) as f64;
        let mut mean = [0.0; 3];
        for p in px.chunks_exact(3) {
            for c in 0..3 {
                mean[c] += p[c] / n;
            }
        }
        for p in px.chunks_exact_mut(3) {
            for c in 0..3 {
                p[c] = (p[c] - mean[c]) * k + mean[c];
            }
        }
    }
    if let Some(off) = bright {
        px.iter_mut().for_each(|v| *v += off);
    }
    if let Some(sigma) = noise.filter(|&s| s > 0.0) {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        px.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    let data = px.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(img.width(), img.height(), data).expect("same size")
}
