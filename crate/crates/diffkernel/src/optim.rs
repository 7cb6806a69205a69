use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled decay, applied as `θ ← θ (1 − lr · weight_decay)`.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Adam moments for every parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
///
/// Gradients are consumed: they are zeroed after the update, so a second
/// call without an intervening backward pass is a state error.
pub fn adam_step(params: &mut ParamStore, opt: &mut OptState) -> Result<()> {
    if !params.grads_ready() {
        return Err(KernelError::State(
            "adam_step called before backward".into(),
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = opt.config;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p, g) in params.param_and_grad_mut() {
        let n = p.len();
        let m = opt
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = opt
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(KernelError::State(format!(
                "moment size mismatch for `{name}`"
            )));
        }
        let decay = 1.0 - lr * weight_decay;
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *pi *= decay;
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if p.data().iter().any(|x| !x.is_finite()) {
            return Err(KernelError::Numeric(format!("adam update of `{name}`")));
        }
    }
    params.zero_grads();
    Ok(())
}
