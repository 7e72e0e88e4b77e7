//! Confusion counts, metric formulas, F1-optimal thresholds and
//! patient-disjoint splitting.
//!
//! IC is the positive class throughout, and a score counts as positive only
//! when it is strictly greater than the threshold.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("threshold selection needs both classes in the labels")]
    SingleClass,
    #[error("split ratio must be in (0, 1], got {0}")]
    InvalidRatio(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "IC")]
    Ic,
    Rest,
}

impl Class {
    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Class::Ic
        } else {
            Class::Rest
        }
    }

    pub fn is_ic(self) -> bool {
        self == Class::Ic
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Class::Ic => "IC",
            Class::Rest => "Rest",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(predictions: &[Class], labels: &[Class]) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Class::Ic, Class::Ic) => c.tp += 1,
            (Class::Ic, Class::Rest) => c.fp += 1,
            (Class::Rest, Class::Ic) => c.fn_ += 1,
            (Class::Rest, Class::Rest) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metric values; `None` marks a zero denominator and serializes as null.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Metrics { accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLevel {
    Patch,
    Slide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: EvalLevel,
    pub center: String,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl MetricsReport {
    pub fn new(level: EvalLevel, center: impl Into<String>, threshold: f64, counts: ConfusionCounts) -> Self {
        Self { level, center: center.into(), threshold, metrics: metrics(&counts), counts }
    }
}

/// Threshold predictions (`score > threshold` is IC) and count.
pub fn confusion_at(scores: &[f64], labels: &[Class], threshold: f64) -> Result<ConfusionCounts, EvalError> {
    let preds: Vec<Class> = scores.iter().map(|&s| Class::from_positive(s > threshold)).collect();
    confusion(&preds, labels)
}

/// F1 as the exact fraction `2TP / (2TP + FP + FN)`; zero when TP is zero.
fn f1_fraction(tp: u64, fp: u64, fn_: u64) -> (u64, u64) {
    if tp == 0 {
        (0, 1)
    } else {
        (2 * tp, 2 * tp + fp + fn_)
    }
}

/// Picks the candidate threshold (distinct scores plus 0 and 1) that
/// maximizes F1 for `score > t`. Ties go to the largest threshold.
pub fn f1_optimal_threshold(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    if positives == 0 || positives == labels.len() as u64 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.extend([0.0, 1.0]);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // sweep candidates ascending; `below` counts items with score <= t
    let (mut below, mut neg_below, mut pos_below) = (0usize, 0u64, 0u64);
    let mut best: Option<((u64, u64), f64)> = None;
    for &t in &candidates {
        while below < order.len() && scores[order[below]] <= t {
            if labels[order[below]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            below += 1;
        }
        let tp = positives - pos_below;
        let fp = (labels.len() as u64 - positives) - neg_below;
        let fn_ = pos_below;
        let f = f1_fraction(tp, fp, fn_);
        // ascending sweep: `>=` lets later (larger) thresholds win ties
        if best.is_none_or(|(b, _)| f.0 as u128 * b.1 as u128 >= b.0 as u128 * f.1 as u128) {
            best = Some((f, t));
        }
    }
    Ok(best.expect("candidates are never empty").1)
}

/// Slide score: the sum of patch scores strictly above `p0`, divided by the
/// number of scored patches. Summed in index order; zero for no patches.
pub fn slide_score(scores: &[f64], p0: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &s in scores {
        if s > p0 {
            sum += s;
        }
    }
    sum / scores.len() as f64
}

/// Patient id with the ids of its slides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientSlides {
    pub patient: String,
    pub slides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Set when only one patient exists and everything went to training.
    pub single_patient: bool,
}

/// Patient-disjoint split: shuffle patients with `seed`, then move them to
/// training until the training side first holds at least `ratio` of slides.
pub fn split_patients(patients: &[PatientSlides], ratio: f64, seed: u64) -> Result<SplitResult, EvalError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(EvalError::InvalidRatio(ratio.to_string()));
    }
    let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in patients {
        grouped.entry(&p.patient).or_default().extend(p.slides.iter().map(String::as_str));
    }
    if grouped.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<(&str, Vec<&str>)> = grouped.into_iter().collect();
    if order.len() == 1 {
        let train = order[0].1.iter().map(|s| s.to_string()).collect();
        return Ok(SplitResult { train, test: Vec::new(), single_patient: true });
    }
    let total: usize = order.iter().map(|(_, s)| s.len()).sum();
    let target = ratio * total as f64 - 1e-9;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, slides) in order {
        let dest = if (train.len() as f64) < target { &mut train } else { &mut test };
        dest.extend(slides.into_iter().map(str::to_string));
    }
    Ok(SplitResult { train, test, single_patient: false })
}
