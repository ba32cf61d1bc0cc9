//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(GpnError::Config(format!(
                "adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(GpnError::Config(format!(
                "adam learning rate and epsilon must be positive, got {} and {}",
                self.learning_rate, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        config.validate()?;
        let first_moment: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second_moment = first_moment.clone();
        Ok(AdamState {
            config,
            step: 0,
            first_moment,
            second_moment,
        })
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        Self::new(config, store.iter().map(|(_, p)| &p.value))
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(GpnError::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(GpnError::shape(
                    "adam_step",
                    format!(
                        "param {i}: value {:?}, grad {:?}, moments {:?}",
                        p.shape(),
                        g.shape(),
                        self.first_moment[i].shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Update every parameter of `store` from its accumulated gradient.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let (mut values, grads): (Vec<&mut Tensor>, Vec<&Tensor>) =
            store.iter_mut().map(|p| (&mut p.value, &p.grad)).unzip();
        self.step(&mut values, &grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + eps)
        assert!((p.item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::row(&[0.3, -2.0, 5.0]);
        let before = p.clone();
        let g = Tensor::zeros(&[1, 3]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]).unwrap();
        for _ in 0..50 {
            st.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2, 2]);
        let g = Tensor::zeros(&[4]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]).unwrap();
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(cfg, std::iter::empty()).is_err());
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
