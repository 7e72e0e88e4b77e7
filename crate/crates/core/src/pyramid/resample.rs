//! Area-average downsampling with exact rational box weights.

use super::image::RgbImage;
use super::PyramidError;

/// Positive rational scale factor `num / den`, reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScaleFactor {
    num: u32,
    den: u32,
}

impl ScaleFactor {
    pub fn new(num: u32, den: u32) -> Result<Self, PyramidError> {
        if num == 0 || den == 0 || num < den {
            return Err(PyramidError::InvalidFactor { num, den });
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn integer(n: u32) -> Result<Self, PyramidError> {
        Self::new(n, 1)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(len / factor)`
    pub fn output_len(&self, len: usize) -> usize {
        (len * self.den as usize).div_ceil(self.num as usize)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Input taps of one output sample along one axis. Weights are in units of
/// `1/den` input pixels.
#[derive(Debug, Clone)]
struct Taps {
    start: usize,
    weights: Vec<u64>,
    total: u64,
}

fn axis_taps(len: usize, f: ScaleFactor) -> Vec<Taps> {
    let (num, den) = (f.num as usize, f.den as usize);
    let limit = len * den;
    (0..f.output_len(len))
        .map(|o| {
            let lo = o * num;
            let hi = ((o + 1) * num).min(limit);
            let first = lo / den;
            let last = (hi - 1) / den;
            let weights: Vec<u64> = (first..=last)
                .map(|i| {
                    let a = lo.max(i * den);
                    let b = hi.min((i + 1) * den);
                    (b - a) as u64
                })
                .collect();
            let total = weights.iter().sum();
            Taps { start: first, weights, total }
        })
        .collect()
}

/// Box-filter `img` by `factor`. Output is `ceil(w / factor) x ceil(h / factor)`;
/// each channel is the coverage-weighted mean of the input pixels under the
/// output footprint, rounded half-up. A trailing partial footprint averages
/// only the input pixels it covers.
pub fn downsample(img: &RgbImage, factor: ScaleFactor) -> Result<RgbImage, PyramidError> {
    if img.width() == 0 || img.height() == 0 {
        return Err(PyramidError::EmptyImage);
    }
    if factor.num == factor.den {
        return Ok(img.clone());
    }
    let xt = axis_taps(img.width(), factor);
    let yt = axis_taps(img.height(), factor);
    let ow = xt.len();
    let mut out = Vec::with_capacity(ow * yt.len() * 3);
    let mut row_acc = vec![0u64; ow * 3];
    let mut col_acc = vec![0u64; ow * 3];
    for ty in &yt {
        col_acc.iter_mut().for_each(|v| *v = 0);
        for (k, &wy) in ty.weights.iter().enumerate() {
            let row = img.row(ty.start + k);
            for (ox, tx) in xt.iter().enumerate() {
                let mut acc = [0u64; 3];
                for (j, &wx) in tx.weights.iter().enumerate() {
                    let p = (tx.start + j) * 3;
                    acc[0] += wx * row[p] as u64;
                    acc[1] += wx * row[p + 1] as u64;
                    acc[2] += wx * row[p + 2] as u64;
                }
                row_acc[ox * 3..ox * 3 + 3].copy_from_slice(&acc);
            }
            for (c, r) in col_acc.iter_mut().zip(&row_acc) {
                *c += wy * r;
            }
        }
        for (ox, tx) in xt.iter().enumerate() {
            let total = tx.total * ty.total;
            for c in 0..3 {
                let sum = col_acc[ox * 3 + c];
                out.push(((2 * sum + total) / (2 * total)) as u8);
            }
        }
    }
    Ok(RgbImage::from_raw(ow, yt.len(), out).expect("dimensions are consistent"))
}
