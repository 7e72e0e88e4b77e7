//! Small convolutional feature extractor with hand-written backprop.
//!
//! Each block is a 3x3 same-padded convolution, ReLU and 2x2 max pool.
//! After the last block a global average pool gives the feature vector,
//! and a single affine unit on top of it is the training head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::bce_with_logit;
use super::ModelError;
use crate::pyramid::RgbImage;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Channel counts from the input (3) through every block.
    pub channels: Vec<usize>,
    /// Side of the square model input in pixels.
    pub input_side: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { channels: vec![3, 8, 16, 32], input_side: 64 }
    }
}

impl ArchConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.len() < 2 || self.channels[0] != 3 || self.channels.contains(&0) {
            return Err(ModelError::InvalidConfig("channels must start at 3 and list at least one block".into()));
        }
        let div = 1usize << self.blocks();
        if self.input_side == 0 || self.input_side % div != 0 {
            return Err(ModelError::InvalidConfig(format!("input_side must be a positive multiple of {div}")));
        }
        Ok(())
    }
}

/// Named view into the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetParams {
    arch: ArchConfig,
    layout: Vec<ParamSlot>,
    values: Vec<f64>,
}

fn build_layout(arch: &ArchConfig) -> Vec<ParamSlot> {
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len = shape.iter().product();
        layout.push(ParamSlot { name, shape, offset, len });
        offset += len;
    };
    for b in 0..arch.blocks() {
        let (cin, cout) = (arch.channels[b], arch.channels[b + 1]);
        push(format!("conv{b}.weight"), vec![cout, cin, 3, 3]);
        push(format!("conv{b}.bias"), vec![cout]);
    }
    push("head.weight".into(), vec![arch.feature_dim()]);
    push("head.bias".into(), vec![1]);
    layout
}

impl ConvNetParams {
    pub fn zeros(arch: ArchConfig) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = build_layout(&arch);
        let n = layout.last().map(|s| s.offset + s.len).unwrap_or(0);
        Ok(Self { arch, layout, values: vec![0.0; n] })
    }

    /// He-normal conv weights, Xavier head, zero biases; fully determined by `seed`.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in p.layout.clone() {
            if slot.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = slot.shape[1..].iter().product::<usize>().max(1);
            let std = if slot.name.starts_with("head") { (1.0 / slot.len as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.values[slot.offset..slot.offset + slot.len] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    /// Rebuilds from a stored flat vector; the length must match the layout.
    pub fn from_values(arch: ArchConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        p.values = values;
        Ok(p)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&[f64]> {
        self.layout.iter().find(|s| s.name == name).map(|s| &self.values[s.offset..s.offset + s.len])
    }

    fn block_params(&self, b: usize) -> (&[f64], &[f64]) {
        let w = &self.layout[2 * b];
        let bias = &self.layout[2 * b + 1];
        (&self.values[w.offset..w.offset + w.len], &self.values[bias.offset..bias.offset + bias.len])
    }

    fn head(&self) -> (&[f64], f64) {
        let n = self.layout.len();
        let w = &self.layout[n - 2];
        let b = &self.layout[n - 1];
        (&self.values[w.offset..w.offset + w.len], self.values[b.offset])
    }
}

/// CHW image scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    side: usize,
    data: Vec<f64>,
}

impl PatchTensor {
    pub fn from_image(img: &RgbImage) -> Result<Self, ModelError> {
        if img.width() != img.height() {
            return Err(ModelError::ShapeMismatch(format!("patch must be square, got {}x{}", img.width(), img.height())));
        }
        let side = img.width();
        let plane = side * side;
        let mut data = vec![0.0; 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p[c] as f64 / 255.0;
            }
        }
        Ok(Self { side, data })
    }

    pub fn from_raw(side: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != 3 * side * side {
            return Err(ModelError::ShapeMismatch("tensor length is not 3*side^2".into()));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

struct BlockCache {
    side: usize,
    input: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<u32>,
}

struct SampleCache {
    blocks: Vec<BlockCache>,
    pooled_side: usize,
    features: Vec<f64>,
    logit: f64,
}

/// `out[oc] = bias[oc] + sum_ic w[oc, ic] * in[ic]`, 3x3 kernel, zero padding.
fn conv3x3(input: &[f64], cin: usize, s: usize, w: &[f64], bias: &[f64], cout: usize, out: &mut [f64]) {
    let plane = s * s;
    for oc in 0..cout {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..cin {
            let x = &input[ic * plane..(ic + 1) * plane];
            let k = &w[(oc * cin + ic) * 9..(oc * cin + ic + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    let (lo, hi) = (1usize.saturating_sub(kx), (s + 1 - kx).min(s));
                    for oy in 0..s {
                        let iy = oy + ky;
                        if iy < 1 || iy > s {
                            continue;
                        }
                        let src = &x[(iy - 1) * s + lo + kx - 1..(iy - 1) * s + hi + kx - 1];
                        let dst = &mut o[oy * s + lo..oy * s + hi];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when asked, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    s: usize,
    w: &[f64],
    dz: &[f64],
    cout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let plane = s * s;
    for oc in 0..cout {
        let g = &dz[oc * plane..(oc + 1) * plane];
        db[oc] += g.iter().sum::<f64>();
        for ic in 0..cin {
            let x = &input[ic * plane..(ic + 1) * plane];
            let kidx = (oc * cin + ic) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (lo, hi) = (1usize.saturating_sub(kx), (s + 1 - kx).min(s));
                    let wv = w[kidx + ky * 3 + kx];
                    let mut acc = 0.0;
                    for oy in 0..s {
                        let iy = oy + ky;
                        if iy < 1 || iy > s {
                            continue;
                        }
                        let xs = &x[(iy - 1) * s + lo + kx - 1..(iy - 1) * s + hi + kx - 1];
                        let gs = &g[oy * s + lo..oy * s + hi];
                        acc += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(dx) = dx.as_deref_mut() {
                            let d = &mut dx[ic * plane + (iy - 1) * s + lo + kx - 1..ic * plane + (iy - 1) * s + hi + kx - 1];
                            for (dv, &gv) in d.iter_mut().zip(gs) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    dw[kidx + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// 2x2 max pool; ties keep the first element in scan order.
fn maxpool2(input: &[f64], c: usize, s: usize) -> (Vec<f64>, Vec<u32>) {
    let h = s / 2;
    let mut out = Vec::with_capacity(c * h * h);
    let mut arg = Vec::with_capacity(c * h * h);
    for ch in 0..c {
        let base = ch * s * s;
        for py in 0..h {
            for px in 0..h {
                let mut best = base + 2 * py * s + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * py + dy) * s + 2 * px + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

fn forward_cached(params: &ConvNetParams, x: &PatchTensor) -> SampleCache {
    let arch = &params.arch;
    let mut act = x.data.clone();
    let mut s = x.side;
    let mut blocks = Vec::with_capacity(arch.blocks());
    for b in 0..arch.blocks() {
        let (cin, cout) = (arch.channels[b], arch.channels[b + 1]);
        let (w, bias) = params.block_params(b);
        let mut pre = vec![0.0; cout * s * s];
        conv3x3(&act, cin, s, w, bias, cout, &mut pre);
        let relu: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let (pooled, argmax) = maxpool2(&relu, cout, s);
        blocks.push(BlockCache { side: s, input: std::mem::replace(&mut act, pooled), pre, argmax });
        s /= 2;
    }
    let c = arch.feature_dim();
    let plane = s * s;
    let features: Vec<f64> = (0..c).map(|ch| act[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
    let (hw, hb) = params.head();
    let logit = hb + hw.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>();
    SampleCache { blocks, pooled_side: s, features, logit }
}

/// Adds this sample's gradient, scaled by `dlogit`, into `grad`.
fn backward_sample(params: &ConvNetParams, cache: &SampleCache, dlogit: f64, grad: &mut [f64]) {
    let arch = &params.arch;
    let layout = &params.layout;
    let n = layout.len();
    let (hw, _) = params.head();
    let hw_slot = &layout[n - 2];
    for (g, f) in grad[hw_slot.offset..hw_slot.offset + hw_slot.len].iter_mut().zip(&cache.features) {
        *g += dlogit * f;
    }
    grad[layout[n - 1].offset] += dlogit;

    let c = arch.feature_dim();
    let plane = cache.pooled_side * cache.pooled_side;
    let mut dpool: Vec<f64> = (0..c * plane).map(|i| dlogit * hw[i / plane] / plane as f64).collect();

    for b in (0..arch.blocks()).rev() {
        let bc = &cache.blocks[b];
        let (cin, cout) = (arch.channels[b], arch.channels[b + 1]);
        let s = bc.side;
        let mut dz = vec![0.0; cout * s * s];
        for (&i, &g) in bc.argmax.iter().zip(&dpool) {
            if bc.pre[i as usize] > 0.0 {
                dz[i as usize] += g;
            }
        }
        let (w, _) = params.block_params(b);
        let (ws, bs) = (&layout[2 * b], &layout[2 * b + 1]);
        let mut dx = (b > 0).then(|| vec![0.0; cin * s * s]);
        let (lo, hi) = grad.split_at_mut(bs.offset);
        conv3x3_backward(
            &bc.input,
            cin,
            s,
            w,
            &dz,
            cout,
            &mut lo[ws.offset..ws.offset + ws.len],
            &mut hi[..bs.len],
            dx.as_deref_mut(),
        );
        if let Some(dx) = dx {
            dpool = dx;
        }
    }
}

fn check_batch(params: &ConvNetParams, batch: &[PatchTensor]) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let side = params.arch.input_side;
    if let Some(bad) = batch.iter().find(|x| x.side != side) {
        return Err(ModelError::ShapeMismatch(format!("expected {side}px input, got {}px", bad.side)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

/// Logits and pooled features for a batch; deterministic.
pub fn forward(params: &ConvNetParams, batch: &[PatchTensor]) -> Result<ForwardOutput, ModelError> {
    check_batch(params, batch)?;
    let caches: Vec<SampleCache> = batch.par_iter().map(|x| forward_cached(params, x)).collect();
    Ok(ForwardOutput {
        logits: caches.iter().map(|c| c.logit).collect(),
        features: caches.into_iter().map(|c| c.features).collect(),
    })
}

/// Pooled backbone features of one patch (the head is not evaluated).
pub fn extract_features(params: &ConvNetParams, patch: &PatchTensor) -> Result<Vec<f64>, ModelError> {
    check_batch(params, std::slice::from_ref(patch))?;
    Ok(forward_cached(params, patch).features)
}

/// Mean BCE over the batch and its exact gradient w.r.t. every parameter.
pub fn loss_and_gradients(
    params: &ConvNetParams,
    batch: &[PatchTensor],
    labels: &[bool],
) -> Result<(f64, Vec<f64>), ModelError> {
    check_batch(params, batch)?;
    if labels.len() != batch.len() {
        return Err(ModelError::ShapeMismatch("labels and batch differ in length".into()));
    }
    let n = batch.len() as f64;
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let cache = forward_cached(params, x);
            let (loss, dlogit) = bce_with_logit(cache.logit, y);
            let mut g = vec![0.0; params.len()];
            backward_sample(params, &cache, dlogit / n, &mut g);
            (loss, g)
        })
        .collect();
    // ordered reduction keeps results independent of the worker count
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss / n, grad))
}

/// ReLU signs and pool winners of every sample; equal patterns mean the
/// network is a fixed smooth function between the two parameter points.
pub fn activation_pattern(params: &ConvNetParams, batch: &[PatchTensor]) -> Result<Vec<u32>, ModelError> {
    check_batch(params, batch)?;
    let mut out = Vec::new();
    for x in batch {
        let cache = forward_cached(params, x);
        for b in &cache.blocks {
            out.extend(b.pre.iter().map(|&v| (v > 0.0) as u32));
            out.extend_from_slice(&b.argmax);
        }
    }
    Ok(out)
}

/// Mean BCE without gradients.
pub fn mean_loss(params: &ConvNetParams, batch: &[PatchTensor], labels: &[bool]) -> Result<f64, ModelError> {
    let out = forward(params, batch)?;
    Ok(out.logits.iter().zip(labels).map(|(&z, &y)| bce_with_logit(z, y).0).sum::<f64>() / batch.len() as f64)
}
