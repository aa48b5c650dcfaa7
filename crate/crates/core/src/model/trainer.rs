//! Minibatch trainer shared by every regression objective.
//!
//! One trainer serves the iterative G-computation model, its biased
//! ablation, and the plain history regressor, so that at horizon τ = 1 —
//! where the three objectives coincide mathematically — their runs are
//! bit-identical under a shared seed: parameter names (and therefore init
//! streams), shuffle order, dropout draws, and loss arithmetic all match.
//!
//! Each trajectory in a minibatch contributes an independent loss graph,
//! so gradient computation parallelizes across trajectories; accumulation
//! and the Adam update are sequential in a fixed order, keeping runs
//! deterministic regardless of thread count.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, clip_global_norm, AdamConfig, AdamState, Arr, Binder, Graph, StreamRng,
};
use crate::datagen::{Dataset, Trajectory};
use crate::error::{Error, Result};

use super::{
    generation_step_std, loss_steps, objective_loss, targets_from_pseudo, IgcModel, ModelConfig,
    Objective, Standardizer,
};

/// The interventional treatment sequence driving pseudo-outcome
/// generation (unused at τ = 1 and by the non-generating objectives).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionPolicy {
    /// One fixed sequence for the whole run, shape `[τ, d_a]`.
    Fixed(Array2<f64>),
    /// A fresh uniform-random binary sequence each epoch, for
    /// query-agnostic training.
    ResampledPerEpoch,
}

/// Training schedule. Architecture lives in [`ModelConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub policy: InterventionPolicy,
    /// Constant shift added to every generated pseudo-outcome
    /// (standardized units); 0 disables. Used to probe robustness to
    /// target corruption.
    pub corruption_bias: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 5e-3,
            policy: InterventionPolicy::ResampledPerEpoch,
            corruption_bias: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, tau: usize, d_a: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.corruption_bias.is_finite() && self.corruption_bias >= 0.0) {
            return Err(Error::Config("corruption_bias must be finite and >= 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if let InterventionPolicy::Fixed(a) = &self.policy {
            if a.nrows() != tau || a.ncols() != d_a {
                return Err(Error::Config(format!(
                    "fixed intervention sequence is {}x{}, expected {tau}x{d_a}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Config("fixed intervention sequence must be 0/1".into()));
            }
        }
        Ok(())
    }
}

/// A trained model together with its per-epoch mean training loss.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: IgcModel,
    pub loss_history: Vec<f64>,
    /// Trajectories too short to contribute any conditioning step.
    pub skipped_short: usize,
}

/// Trains the iterative G-computation objective.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_objective(dataset, model_cfg, cfg, Objective::Igc)
}

/// Ablation: heads regress the factual `Y_{t+τ}` directly, converging to
/// the confounded conditional expectation instead of the G-formula.
pub fn train_biased_ablation(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_objective(dataset, model_cfg, cfg, Objective::BiasedAblation)
}

/// Shared entry point for all objectives.
pub fn train_with_objective(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg.tau, dataset.d_a)?;
    let dims = crate::backbone::HistoryDims::of_dataset(dataset);
    let standardizer = Standardizer::fit(dataset);
    let mut model = IgcModel::new(model_cfg.clone(), dims, standardizer, cfg.seed, objective)?;
    let tau = model_cfg.tau;

    // Standardize once; keep original indices so per-trajectory RNG keys
    // are independent of shuffling and batch composition.
    let kept: Vec<(u64, Trajectory)> = dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, tr)| !loss_steps(tr.len(), tau).is_empty())
        .map(|(i, tr)| (i as u64, model.standardizer.apply(tr)))
        .collect();
    let skipped_short = dataset.trajectories.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::contract(
            "train",
            format!("no trajectory has the >= tau+2 = {} steps a loss term needs", tau + 2),
        ));
    }

    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new(&model.store);
    let shuffle_base = StreamRng::new(cfg.seed, "shuffle");
    let dropout_base = StreamRng::new(cfg.seed, "dropout");
    let intervention_base = StreamRng::new(cfg.seed, "intervention");
    let generates = objective == Objective::Igc && tau >= 2;

    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let a_bar: Option<Array2<f64>> = if generates {
            Some(match &cfg.policy {
                InterventionPolicy::Fixed(a) => a.clone(),
                InterventionPolicy::ResampledPerEpoch => {
                    let mut rng = intervention_base.substream_idx("epoch", epoch as u64);
                    let mut a = Array2::zeros((tau, dims.d_a));
                    for i in 0..tau {
                        for j in 0..dims.d_a {
                            a[[i, j]] = f64::from(rng.bernoulli(0.5));
                        }
                    }
                    a
                }
            })
        } else {
            None
        };

        let mut order: Vec<usize> = (0..kept.len()).collect();
        shuffle_base.substream_idx("epoch", epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let results: Result<Vec<PerTrajectory>> = chunk
                .par_iter()
                .map(|&pos| {
                    let (orig_idx, tr) = &kept[pos];
                    let mut rng = dropout_base
                        .substream_idx("epoch", epoch as u64)
                        .substream_idx("traj", *orig_idx);
                    trajectory_step(&model, tr, a_bar.as_ref(), cfg.corruption_bias, scale, &mut rng)
                })
                .collect();
            let results = results?;
            for r in &results {
                if let Some(h) = r.bad_head {
                    return Err(Error::numeric(
                        "train",
                        format!("non-finite loss at epoch {epoch}, batch {batch_idx}, head {h}"),
                    ));
                }
            }
            let mut acc: Vec<Option<Arr>> = vec![None; model.store.len()];
            for r in results {
                loss_sum += r.value;
                for (slot, g) in acc.iter_mut().zip(r.grads) {
                    match (slot.as_mut(), g) {
                        (Some(s), Some(g)) => *s += &g,
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            let norm = clip_global_norm(&mut acc, cfg.clip_norm.unwrap_or(f64::INFINITY));
            if !norm.is_finite() {
                return Err(Error::numeric(
                    "train",
                    format!("non-finite gradient at epoch {epoch}, batch {batch_idx}"),
                ));
            }
            adam_step(&mut model.store, &acc, &mut adam, &adam_cfg)?;
        }
        loss_history.push(loss_sum / kept.len() as f64);
    }
    Ok(TrainOutcome { model, loss_history, skipped_short })
}

struct PerTrajectory {
    /// Unscaled per-trajectory loss (mean over its terms).
    value: f64,
    /// Store-aligned gradients of the `1/B`-scaled loss.
    grads: Vec<Option<Arr>>,
    /// First head whose loss term is non-finite, if any.
    bad_head: Option<usize>,
}

/// Generation (detached) plus one attached loss graph for one trajectory.
fn trajectory_step(
    model: &IgcModel,
    std_traj: &Trajectory,
    a_bar: Option<&Array2<f64>>,
    corruption_bias: f64,
    scale: f64,
    rng: &mut StreamRng,
) -> Result<PerTrajectory> {
    let targets = head_targets(model, std_traj, a_bar, corruption_bias)?;
    let g = Graph::new();
    let mut binder = Binder::new(&g, &model.store);
    let (loss, finite) = objective_loss(&g, &mut binder, model, std_traj, &targets, true, rng)?;
    let value = loss.value()?;
    let scaled = g.affine(&loss, scale, 0.0)?;
    let grads_map = g.backward(&scaled)?;
    let grads = binder
        .slots()
        .iter()
        .map(|slot| slot.as_ref().and_then(|t| grads_map.get(t).cloned()))
        .collect();
    Ok(PerTrajectory { value, grads, bad_head: finite.iter().position(|f| !f) })
}

/// Per-head regression targets for one standardized trajectory
/// (standardized units).
fn head_targets(
    model: &IgcModel,
    std_traj: &Trajectory,
    a_bar: Option<&Array2<f64>>,
    corruption_bias: f64,
) -> Result<Vec<Array2<f64>>> {
    let tau = model.config.tau;
    let steps = loss_steps(std_traj.len(), tau);
    match model.objective {
        Objective::Igc if tau >= 2 => {
            let a_bar = a_bar.ok_or_else(|| {
                Error::contract("train", "pseudo-outcome generation needs an intervention sequence")
            })?;
            let pseudo: Result<Vec<_>> = steps
                .clone()
                .map(|t| generation_step_std(model, std_traj, t, a_bar, corruption_bias))
                .collect();
            targets_from_pseudo(model, steps, &pseudo?)
        }
        // At τ = 1, and for the non-generating objectives, every head
        // regresses the standardized factual outcome directly.
        _ => Ok(vec![outcome_block(model, std_traj, &steps); model.heads().len()]),
    }
}

/// `[n_t, d_y]` block of standardized factual outcomes `Y_{t+τ}`.
fn outcome_block(
    model: &IgcModel,
    std_traj: &Trajectory,
    steps: &std::ops::Range<usize>,
) -> Array2<f64> {
    let tau = model.config.tau;
    let mut block = Array2::zeros((steps.len(), model.dims.d_y));
    for (i, t) in steps.clone().enumerate() {
        for j in 0..model.dims.d_y {
            block[[i, j]] = std_traj.y[[t + tau, j]];
        }
    }
    block
}
