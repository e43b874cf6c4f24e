//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::GradMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config(
                "learning rate and eps must be positive".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in params.named() {
            m.insert(name.clone(), vec![0.0; tensor.numel()]);
            v.insert(name, vec![0.0; tensor.numel()]);
        }
        AdamState {
            m,
            v,
            t: 0,
        }
    }
}

/// One bias-corrected update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradMap,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (name, tensor) in params.named_mut() {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::OptimizerState(format!("missing gradient for \"{name}\"")))?;
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| Error::OptimizerState(format!("missing moment state for \"{name}\"")))?;
        let v = state.v.get_mut(&name).expect("m and v share keys");
        if g.len() != tensor.numel() || m.len() != tensor.numel() {
            return Err(Error::OptimizerState(format!(
                "length mismatch for \"{name}\": param {}, grad {}, state {}",
                tensor.numel(),
                g.len(),
                m.len()
            )));
        }
        let data = tensor.data_mut();
        for i in 0..data.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
