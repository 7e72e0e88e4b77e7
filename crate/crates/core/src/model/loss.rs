//! Binary cross-entropy on sigmoid outputs.

/// Probabilities are clamped to this distance from 0 and 1 inside the loss.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[eps, 1 - eps]`.
#[inline]
pub fn bce_loss(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Loss and its derivative with respect to the logit, `p - y`.
#[inline]
pub fn bce_with_logit(logit: f64, y: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    (bce_loss(p, y), p - if y { 1.0 } else { 0.0 })
}
