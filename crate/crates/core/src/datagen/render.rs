//! Procedural H&E-like textures rendered from a region map.
//!
//! Every pixel is a pure function of the slide seed, its coordinates and its
//! region, so rows can be rendered in any order or in parallel.

use rayon::prelude::*;

use super::profile::CenterProfile;
use crate::pyramid::RgbImage;

pub const BACKGROUND: u8 = 0;
pub const STROMA: u8 = 1;
pub const BENIGN: u8 = 2;
pub const IC: u8 = 3;

/// Optical density per unit stain, RGB.
const HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
const EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// Region label per base pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl RegionMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![BACKGROUND; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn tissue(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` from a seed, two coordinates and a channel tag.
fn unit(seed: u64, x: i64, y: i64, tag: u64) -> f64 {
    let h = mix(seed ^ mix((x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ mix((y as u64) ^ tag.rotate_left(32))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in `[0, 1)` on a lattice of pitch `cell`.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64, tag: u64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
    let (fx, fy) = (gx - ix as f64, gy - iy as f64);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let v = |dx, dy| unit(seed, ix + dx, iy + dy, tag);
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * sx;
    let bot = v(0, 1) + (v(1, 1) - v(0, 1)) * sx;
    top + (bot - top) * sy
}

/// Nuclei laid on a jittered lattice. Returns the hematoxylin boost of the
/// nucleus covering the point, if any.
struct Nuclei {
    pitch: f64,
    jitter: f64,
    radius: [f64; 2],
    stain: [f64; 2],
    tag: u64,
}

const BENIGN_NUCLEI: Nuclei = Nuclei { pitch: 14.0, jitter: 1.5, radius: [4.5, 5.5], stain: [1.2, 1.35], tag: 11 };
const IC_NUCLEI: Nuclei = Nuclei { pitch: 12.0, jitter: 3.5, radius: [4.0, 7.0], stain: [1.6, 2.1], tag: 23 };

impl Nuclei {
    fn hit(&self, seed: u64, x: f64, y: f64) -> Option<f64> {
        let (cx, cy) = ((x / self.pitch).floor() as i64, (y / self.pitch).floor() as i64);
        let reach = if self.jitter + self.radius[1] > self.pitch / 2.0 { 1 } else { 0 };
        let mut best: Option<f64> = None;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (i, j) = (cx + dx, cy + dy);
                let u = |t| unit(seed, i, j, self.tag + t);
                let nx = (i as f64 + 0.5) * self.pitch + self.jitter * (2.0 * u(0) - 1.0);
                let ny = (j as f64 + 0.5) * self.pitch + self.jitter * (2.0 * u(1) - 1.0);
                let r = self.radius[0] + (self.radius[1] - self.radius[0]) * u(2);
                let d2 = (x - nx).powi(2) + (y - ny).powi(2);
                if d2 <= r * r {
                    let s = self.stain[0] + (self.stain[1] - self.stain[0]) * u(3);
                    best = Some(best.map_or(s, |b: f64| b.max(s)));
                }
            }
        }
        best
    }
}

/// Stain densities `(hematoxylin, eosin)` before noise.
fn densities(seed: u64, label: u8, x: f64, y: f64) -> (f64, f64) {
    match label {
        STROMA => {
            let bend = 3.0 * value_noise(seed, x, y, 96.0, 1);
            let fiber = ((x * 0.6 + y * 0.8) / 5.0 + bend * 4.0).sin();
            (0.08, 0.55 + 0.10 * fiber)
        }
        BENIGN => match BENIGN_NUCLEI.hit(seed, x, y) {
            Some(h) => (h, 0.25),
            None => (0.40, 0.45),
        },
        IC => match IC_NUCLEI.hit(seed, x, y) {
            Some(h) => (h, 0.25),
            None => (0.50, 0.40),
        },
        _ => (0.0, 0.0),
    }
}

/// Renders the base image of a slide from its region map.
pub fn render(regions: &RegionMap, profile: &CenterProfile, seed: u64) -> RgbImage {
    let (w, h) = (regions.width, regions.height);
    let mut data = vec![255u8; w * h * 3];
    let grain = 0.05 * profile.grain_scale;
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let label = regions.get(x, y);
            if label == BACKGROUND {
                continue;
            }
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let (mut hd, mut ed) = densities(seed, label, xf, yf);
            hd = (hd + grain * (2.0 * unit(seed, x as i64, y as i64, 101) - 1.0)).max(0.0);
            ed = (ed + grain * (2.0 * unit(seed, x as i64, y as i64, 102) - 1.0)).max(0.0);
            let rgb = std::array::from_fn(|c| 255.0 * (-(hd * HEMATOXYLIN[c] + ed * EOSIN[c])).exp());
            let out = profile.apply(rgb);
            for c in 0..3 {
                row[3 * x + c] = out[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    RgbImage::from_raw(w, h, data).expect("sized buffer")
}
