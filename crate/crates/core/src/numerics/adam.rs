use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::config(format!(
                "adam: invalid hyperparameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Ok(Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Nothing is modified when an error is returned.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam_step: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    expected: self.first[i].shape().to_vec(),
                    got: if p.shape() != self.first[i].shape() {
                        p.shape().to_vec()
                    } else {
                        g.shape().to_vec()
                    },
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("adam_step: gradient {i}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
                let m_hat = md[k] / c1;
                let v_hat = vd[k] / c2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
