//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "adam state has {} slots, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = AdamState::new(3, 0.001);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(1, 0.001);
        let mut p = vec![0.0];
        s.step(&mut p, &[2.0]).unwrap();
        let expect = -0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let mut s = AdamState::new(2, 0.0);
        let mut p = vec![0.3, 0.4];
        for g in [[1.0, -5.0], [100.0, 0.1], [-3.0, 2.0]] {
            s.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, vec![0.3, 0.4]);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2, 0.1);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
