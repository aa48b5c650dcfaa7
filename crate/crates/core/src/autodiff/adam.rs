//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use super::ops::Arr;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults are the standard
/// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// First/second-moment state, one slot per parameter in the store.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.values().iter().map(|p| Arr::zeros(p.raw_dim())).collect();
        let v = store.values().iter().map(|p| Arr::zeros(p.raw_dim())).collect();
        AdamState { t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every parameter in the store.
///
/// `grads` is aligned with the store's slots; `None` entries are treated as
/// zero gradients (moments still decay, matching a joint update of all
/// parameters).
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Arr>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract(
            "adam_step",
            format!(
                "slot counts differ: {} params, {} grads, {} moment slots",
                store.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);

    for (i, p) in store.values_mut().iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        if let Some(g) = &grads[i] {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("grad {:?} != param {:?} at slot {i}", g.shape(), p.shape()),
                ));
            }
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            });
        } else {
            m.mapv_inplace(|m| cfg.beta1 * m);
            v.mapv_inplace(|v| cfg.beta2 * v);
        }
        ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Arr>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}
