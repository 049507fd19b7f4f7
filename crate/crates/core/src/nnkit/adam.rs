use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-corrected Adam over a flat parameter vector. Moment buffers are
/// allocated on the first step and shape-checked afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient (`g + wd·w`).
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Param(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::Param(format!("eps must be positive, got {eps}")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay: 0.0,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    /// `lr` with the usual `0.9 / 0.999 / 1e-8`.
    pub fn with_lr(lr: f64) -> Result<Self> {
        Adam::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.t == 0 && self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        } else if self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state holds {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_by_hand() {
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-7).unwrap();
        let mut w = [0.0];
        adam.step(&mut w, &[1.0]).unwrap();
        assert_eq!(adam.steps(), 1);
        let expected = -1e-3 / (1.0 + 1e-7);
        assert!((w[0] - expected).abs() < 1e-18);
        assert!((w[0] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::with_lr(0.1).unwrap();
        let mut w = [0.5, -1.5, 2.0];
        adam.step(&mut w, &[0.0; 3]).unwrap();
        assert_eq!(w, [0.5, -1.5, 2.0]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut adam = Adam::with_lr(0.01).unwrap();
            let mut w = vec![0.3, -0.2];
            for k in 0..20 {
                let g: Vec<f64> = w.iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                adam.step(&mut w, &g).unwrap();
            }
            w
        };
        let a = run();
        let b = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::with_lr(0.1).unwrap();
        assert!(matches!(adam.step(&mut [0.0; 2], &[0.0; 3]), Err(Error::Shape(_))));
        adam.step(&mut [0.0; 2], &[1.0; 2]).unwrap();
        assert!(matches!(adam.step(&mut [0.0; 3], &[1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Adam::new(0.0, 0.9, 0.999, 1e-8).is_err());
        assert!(Adam::new(1e-3, 1.0, 0.999, 1e-8).is_err());
        assert!(Adam::new(1e-3, 0.9, -0.1, 1e-8).is_err());
    }
}
