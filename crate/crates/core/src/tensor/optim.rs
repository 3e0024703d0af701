//! AdamW with bias-corrected moments and decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One parameter handed to [`AdamW::step`].
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Optimizer state: per-parameter moment buffers keyed by parameter name.
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`.
    ///
    /// Every slot is validated before anything is written, so a rejected
    /// step leaves both the parameters and the optimizer state untouched.
    pub fn step(&mut self, lr: f64, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for slot in slots.iter() {
            if slot.value.shape() != slot.grad.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?} but its gradient has {:?}",
                    slot.name,
                    slot.value.shape(),
                    slot.grad.shape()
                )));
            }
            if let Some(m) = self.moments.get(slot.name) {
                if m.first.shape() != slot.value.shape() {
                    return Err(Error::shape(format!(
                        "parameter {} changed shape from {:?} to {:?}",
                        slot.name,
                        m.first.shape(),
                        slot.value.shape()
                    )));
                }
            }
            if !slot.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", slot.name)));
            }
        }

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in slots.iter_mut() {
            let m = self
                .moments
                .entry(slot.name.to_string())
                .or_insert_with(|| Moments {
                    first: Tensor::zeros(slot.value.shape()),
                    second: Tensor::zeros(slot.value.shape()),
                });
            let decay = if slot.decay { lr * weight_decay } else { 0.0 };
            let values = slot.value.data_mut();
            let (first, second) = (m.first.data_mut(), m.second.data_mut());
            for (i, &g) in slot.grad.data().iter().enumerate() {
                first[i] = beta1 * first[i] + (1.0 - beta1) * g;
                second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
                let m_hat = first[i] / bc1;
                let v_hat = second[i] / bc2;
                values[i] -= decay * values[i];
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
