use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters (AdamW) instead of
    /// folding it into the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoupled: false,
        }
    }
}

/// First and second moment estimates for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::invalid(format!("adam learning rate must be > 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape(g, "adam_step")?;
            p.expect_same_shape(&self.m[i], "adam_step")?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let mut gj = g.data()[j];
                if !c.decoupled {
                    gj += c.weight_decay * *x;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if c.decoupled {
                    *x -= c.lr * c.weight_decay * *x;
                }
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::new(plain(0.1), &[(2, 2)]).unwrap();
        let mut p = Tensor::filled(2, 2, 0.7);
        s.step(&mut [&mut p], &[Tensor::zeros(2, 2)]).unwrap();
        assert_eq!(p, Tensor::filled(2, 2, 0.7));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = plain(0.01);
        let mut s = AdamState::new(cfg, &[(1, 1)]).unwrap();
        let mut p = Tensor::scalar(1.0);
        s.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1.
        let expected = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn moments_grow_and_steps_count() {
        let mut s = AdamState::new(plain(0.01), &[(1, 1)]).unwrap();
        let mut p = Tensor::scalar(0.0);
        s.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let (m1, v1) = (s.first_moments()[0].get(0, 0), s.second_moments()[0].get(0, 0));
        s.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!(s.first_moments()[0].get(0, 0) > m1);
        assert!(s.second_moments()[0].get(0, 0) > v1);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut s = AdamState::new(plain(0.01), &[(1, 1)]).unwrap();
        let mut p = Tensor::scalar(0.0);
        let r = s.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(AdamState::new(plain(0.0), &[(1, 1)]).is_err());
    }
}
