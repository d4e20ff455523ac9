//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use pn_tensor::{Element, Gradients, Var};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.005 }
    }
}

/// First and second moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update at step `t` (1-based). Decay is applied directly to the
/// weights, `w ← w·(1 − lr·wd)`, before the bias-corrected Adam step.
pub fn adamw_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i].to_f64_lossy();
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let w = param[i].to_f64_lossy() * shrink;
        let upd = lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        param[i] = T::from_f64_lossy(w - upd);
    }
}

/// AdamW over a parameter store. Weight decay applies only to the
/// [`ParamGroup::Decay`] group; parameters without a gradient are skipped.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    state: HashMap<ParamId, AdamState>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, t: 0, state: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Element>(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &Gradients<T>,
        bindings: &[(ParamId, Var)],
        lr: f64,
    ) -> Result<()> {
        self.step_scaled(store, grads, bindings, lr, 1.0)
    }

    /// As [`AdamW::step`] with every gradient multiplied by `scale` first.
    pub fn step_scaled<T: Element>(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &Gradients<T>,
        bindings: &[(ParamId, Var)],
        lr: f64,
        scale: f64,
    ) -> Result<()> {
        self.t += 1;
        for &(id, var) in bindings {
            let Some(g) = grads.get(var) else { continue };
            let decay = store.group(id) == ParamGroup::Decay;
            let p = store.value_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let st = self.state.entry(id).or_insert_with(|| AdamState::zeros(g.numel()));
            if scale == 1.0 {
                adamw_step(p.data_mut(), g.data(), st, self.t, lr, &self.cfg, decay);
            } else {
                let scaled: Vec<T> = g.data().iter().map(|v| T::from_f64_lossy(v.to_f64_lossy() * scale)).collect();
                adamw_step(p.data_mut(), &scaled, st, self.t, lr, &self.cfg, decay);
            }
        }
        Ok(())
    }
}

/// L2 norm over the gradients of all bound parameters.
pub fn global_grad_norm<T: Element>(grads: &Gradients<T>, bindings: &[(ParamId, Var)]) -> f64 {
    bindings
        .iter()
        .filter_map(|&(_, v)| grads.get(v))
        .flat_map(|g| g.data().iter().map(|x| x.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt()
}
