//! Central finite-difference check of the analytic gradients.

use super::convnet::{activation_pattern, loss_and_gradients, mean_loss, ConvNetParams, PatchTensor};
use super::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Parameters whose `±h` interval crossed a ReLU or pooling kink and were
    /// checked with a smaller step instead.
    pub kink_rechecks: usize,
    /// Smallest step used by a kink recheck.
    pub min_step: f64,
    /// Name of the slot holding the worst parameter.
    pub worst_slot: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares every analytic partial derivative with `(L(θ+h) − L(θ−h)) / 2h`.
///
/// A parameter passes when `|a − n| ≤ rel_tol · max(|a|, |n|) + abs_floor`;
/// the floor only matters for gradients that are zero up to rounding.
///
/// The loss is only piecewise smooth. When the activation pattern at `θ ± h`
/// differs from the one at `θ`, the central difference straddles a kink and
/// says nothing about the derivative at `θ`; the step is then divided by 10
/// until the interval is kink-free (down to `h · 1e-4`), and the parameter is
/// counted in `kink_rechecks`.
pub fn check_gradients(
    params: &ConvNetParams,
    batch: &[PatchTensor],
    labels: &[bool],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport, ModelError> {
    let (_, analytic) = loss_and_gradients(params, batch, labels)?;
    let mut probe = params.clone();
    let base = activation_pattern(params, batch)?;
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        kink_rechecks: 0,
        min_step: h,
        worst_slot: String::new(),
    };
    for slot in params.layout() {
        for i in slot.offset..slot.offset + slot.len {
            let orig = params.values()[i];
            let mut step = h;
            let numeric = loop {
                probe.values_mut()[i] = orig + step;
                let up = mean_loss(&probe, batch, labels)?;
                let smooth_up = activation_pattern(&probe, batch)? == base;
                probe.values_mut()[i] = orig - step;
                let down = mean_loss(&probe, batch, labels)?;
                let smooth_down = activation_pattern(&probe, batch)? == base;
                probe.values_mut()[i] = orig;
                if (smooth_up && smooth_down) || step <= h * 1e-4 {
                    break (up - down) / (2.0 * step);
                }
                step /= 10.0;
            };
            if step < h {
                report.kink_rechecks += 1;
                report.min_step = report.min_step.min(step);
            }
            let a = analytic[i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if diff > rel_tol * scale + abs_floor {
                report.failures += 1;
            }
            let rel = if scale > abs_floor { diff / scale } else { 0.0 };
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_slot = slot.name.clone();
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
