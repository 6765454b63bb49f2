use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.03, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for one named parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Moments<T: Scalar> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    /// Updates applied to this parameter; drives its bias correction.
    pub updates: u64,
}

/// Adam with bias correction. Parameters are keyed by name, so a parameter
/// left out of a step keeps its moments untouched (sparse updates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<T: Scalar = f32> {
    config: AdamConfig,
    steps: u64,
    slots: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, steps: 0, slots: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.slots.get(name)
    }

    /// Applies one update to every listed parameter and clears their
    /// gradients. Nothing is modified if any parameter lacks a gradient.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>)]) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(TensorError::State(format!("parameter `{name}` has no gradient")));
            }
            if let Some(slot) = self.slots.get(*name) {
                if slot.first.len() != p.numel() {
                    return Err(TensorError::State(format!(
                        "parameter `{name}` has {} values but its moments hold {}",
                        p.numel(),
                        slot.first.len()
                    )));
                }
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        for (name, p) in params.iter_mut() {
            let slot = self.slots.entry((*name).to_string()).or_insert_with(|| Moments {
                first: vec![T::zero(); p.numel()],
                second: vec![T::zero(); p.numel()],
                updates: 0,
            });
            slot.updates += 1;
            let t = slot.updates as i32;
            let c1 = T::one() - T::of(beta1.powi(t));
            let c2 = T::one() - T::of(beta2.powi(t));
            let grad = p.grad().expect("checked above").to_vec();
            for (j, value) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                slot.first[j] = b1 * slot.first[j] + (T::one() - b1) * g;
                slot.second[j] = b2 * slot.second[j] + (T::one() - b2) * g * g;
                let m_hat = slot.first[j] / c1;
                let v_hat = slot.second[j] / c2;
                *value = *value - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.clear_grad();
        }
        self.steps += 1;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect();
        AdamState {
            config: self.config,
            steps: self.steps,
            slots: self
                .slots
                .iter()
                .map(|(k, m)| {
                    (k.clone(), Moments { first: conv(&m.first), second: conv(&m.second), updates: m.updates })
                })
                .collect(),
        }
    }
}
