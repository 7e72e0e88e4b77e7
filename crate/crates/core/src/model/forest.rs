//! Random forest over backbone features: bootstrap samples, Gini splits on a
//! random feature subset per node, leaves storing the IC proportion.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 16, min_samples_split: 2, bootstrap: true, max_features: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature as usize] <= threshold { left as usize } else { right as usize };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left as usize).max(walk(t, right as usize)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Mean of per-tree leaf proportions.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ModelError> {
        if x.len() != self.n_features {
            return Err(ModelError::ShapeMismatch(format!("forest expects {} features, got {}", self.n_features, x.len())));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Structural checks used after deserialization.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.trees.is_empty() {
            return Err(ModelError::Format("forest has no trees".into()));
        }
        for t in &self.trees {
            if t.nodes.is_empty() {
                return Err(ModelError::Format("empty tree".into()));
            }
            for (i, n) in t.nodes.iter().enumerate() {
                match *n {
                    Node::Leaf { value } if !(0.0..=1.0).contains(&value) => {
                        return Err(ModelError::Format(format!("leaf value {value} outside [0, 1]")))
                    }
                    Node::Split { feature, left, right, threshold } => {
                        let ok = (feature as usize) < self.n_features
                            && (left as usize) < t.nodes.len()
                            && (right as usize) < t.nodes.len()
                            && left as usize > i
                            && right as usize > i
                            && !threshold.is_nan();
                        if !ok {
                            return Err(ModelError::Format("malformed split node".into()));
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Per-tree seed: splitmix of the forest seed and the tree index.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let id = self.nodes.len() as u32;
        let leaf = Node::Leaf { value: pos as f64 / n as f64 };
        self.nodes.push(leaf);
        if depth >= self.cfg.max_depth || n < self.cfg.min_samples_split.max(2) || pos == 0 || pos == n {
            return id;
        }
        let d = self.x[0].len();
        let features = sample(rng, d, self.mtry.min(d));
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for f in features.iter() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_pos = 0;
            for k in 0..n - 1 {
                left_pos += self.y[order[k]] as usize;
                let (va, vb) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                if va == vb {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                let child = (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(pos - left_pos, nr)) / n as f64;
                let gain = parent - child;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = va + (vb - va) / 2.0;
                    // guard against the midpoint rounding onto the upper value
                    let thr = if mid < vb { mid } else { va };
                    best = Some((gain, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return id };
        // partition in place, keeping relative order on each side
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&mut l, depth + 1, rng);
        let right = self.grow(&mut r, depth + 1, rng);
        self.nodes[id as usize] = Node::Split { feature: feature as u32, threshold, left, right };
        id
    }
}

/// Fits the forest. Trees are independent given their derived seeds, so
/// they train in parallel and the result does not depend on thread count.
pub fn train_forest(features: &[Vec<f64>], labels: &[bool], cfg: &ForestConfig, seed: u64) -> Result<ForestModel, ModelError> {
    if features.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if features.len() != labels.len() {
        return Err(ModelError::ShapeMismatch("features and labels differ in length".into()));
    }
    if cfg.n_trees == 0 {
        return Err(ModelError::InvalidConfig("n_trees must be positive".into()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(ModelError::ShapeMismatch("ragged or empty feature vectors".into()));
    }
    let mtry = cfg.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);
    let n = features.len();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let mut idx: Vec<usize> =
                if cfg.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            let mut b = Builder { x: features, y: labels, cfg, mtry, nodes: Vec::new() };
            b.grow(&mut idx, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel { n_features: d, trees })
}
