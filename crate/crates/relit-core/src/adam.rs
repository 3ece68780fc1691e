//! Adam optimizer over a flat parameter vector.
//!
//! Used by both the lighting fit and the demo network training. Moment
//! decay rates default to (0.95, 0.90); note the second moment decays
//! faster than the first here, which trades smoothing for responsiveness
//! on these short optimization runs.

use crate::error::{RelitError, Result};

/// First/second moment estimates plus hyperparameters for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            learning_rate,
            beta1: 0.95,
            beta2: 0.90,
            epsilon: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    /// Apply one bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(RelitError::DimensionMismatch(format!(
                "optimizer holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                return Err(RelitError::NonFinite {
                    step: self.t as usize,
                    detail: format!("gradient entry {i}"),
                });
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            if !params[i].is_finite() {
                return Err(RelitError::NonFinite {
                    step: self.t as usize,
                    detail: format!("parameter entry {i}"),
                });
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = |x - 3|^2, gradient 2(x - 3). With a constant learning
        // rate the iterate settles into a band around the optimum whose
        // width tracks the learning rate.
        let mut x = vec![0.0f64];
        let mut opt = Adam::new(1, 0.01);
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 3.0)];
            opt.step(&mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 0.03, "x = {}", x[0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first update lr * sign(g) regardless of
        // gradient scale (up to the epsilon regularizer).
        for g in [1e-3, 1.0, 1e6] {
            let mut x = vec![0.0f64];
            let mut opt = Adam::new(1, 0.05);
            opt.step(&mut x, &[g]).unwrap();
            assert!((x[0] + 0.05).abs() < 0.05 * 1e-4, "g = {g}, x = {}", x[0]);
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut x = vec![0.0f64];
        let mut opt = Adam::new(1, 0.1);
        let err = opt.step(&mut x, &[f64::NAN]).unwrap_err();
        assert!(err.is_internal());
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut x = vec![0.0f64; 2];
        let mut opt = Adam::new(3, 0.1);
        assert!(opt.step(&mut x, &[0.0, 0.0]).is_err());
    }
}
