//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let AdamConfig { lr, beta1, beta2, eps } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(lr.is_finite() && lr >= 0.0 && eps.is_finite() && eps > 0.0) {
            return Err(Error::config("Adam lr must be finite and ≥ 0, eps finite and > 0"));
        }
        Ok(AdamState {
            config,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }
}

/// One Adam update from the gradients stored in `params`; gradients are
/// zeroed afterwards. A non-finite gradient aborts the step before any
/// parameter changes.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if let Some((name, _)) = params
        .iter()
        .find(|(_, p)| p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient(name.clone()));
    }
    state.step_count += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grads();
    Ok(())
}
