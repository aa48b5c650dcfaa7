//! Inverse-propensity-weighted outcome regression.
//!
//! Instead of iterating regressions through time, this estimator reweights
//! the factual `Y_{t+τ}` by the inverse probability of having followed the
//! queried treatment sequence, then regresses the weighted pseudo-outcome
//! `W_t · Y_{t+τ}` on the encoded history alone. Rows whose factual
//! treatments diverge from the query get weight zero but stay in the
//! regression (the Horvitz–Thompson estimator averages over them); batches
//! in which *no* row matched carry no signal and are skipped.
//!
//! The weight divides by a product of `τ` estimated propensities, so its
//! variance inflates exponentially as overlap thins — the comparison this
//! baseline exists to make.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Binder, Graph, ParamStore, StreamRng, Tensor};
use crate::backbone::{Backbone, BackboneConfig, HistoryDims, HistorySlice};
use crate::datagen::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::model::{loss_steps, HeadParams, Standardizer};

use super::propensity::PropensityModel;
use super::{run_sgd, FitSchedule};

/// Whether weights are stabilized by marginal treatment probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightStabilization {
    /// Stabilize exactly when the horizon multiplies two or more inverse
    /// propensities (τ ≥ 2), where raw products degrade fastest.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpwConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    /// Prediction horizon τ ≥ 1.
    pub tau: usize,
    pub stabilized: WeightStabilization,
    pub schedule: FitSchedule,
}

impl Default for IpwConfig {
    fn default() -> Self {
        IpwConfig {
            backbone: BackboneConfig::default(),
            head_hidden: 32,
            tau: 2,
            stabilized: WeightStabilization::Auto,
            schedule: FitSchedule::default(),
        }
    }
}

impl IpwConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.validate()?;
        if self.tau == 0 {
            return Err(Error::Config("horizon tau must be >= 1".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be >= 1".into()));
        }
        Ok(())
    }

    fn stabilize(&self) -> bool {
        match self.stabilized {
            WeightStabilization::Auto => self.tau >= 2,
            WeightStabilization::On => true,
            WeightStabilization::Off => false,
        }
    }
}

/// Probability of one treatment row under independent per-dimension
/// probabilities: `Π_j (a_j = 1 ? p_j : 1 − p_j)`.
pub fn treatment_row_prob(probs: ArrayView1<'_, f64>, a_row: ArrayView1<'_, f64>) -> f64 {
    probs.iter().zip(a_row.iter()).map(|(p, a)| if *a == 1.0 { *p } else { 1.0 - *p }).product()
}

/// One weighted regression row: at conditioning step `t`, the factual
/// `Y_{t+τ}` scaled by the inverse-propensity weight of the queried
/// sequence (zero when the factual treatments diverge from it).
#[derive(Debug, Clone, PartialEq)]
pub struct IpwPseudoOutcome {
    pub t: usize,
    pub weight: f64,
    /// `weight · Y_{t+τ}`, one entry per outcome dimension.
    pub value: Vec<f64>,
}

/// Weighted pseudo-outcomes for every conditioning step of one trajectory.
///
/// `probs[s, j]` is the estimated probability that treatment dimension `j`
/// was set at step `s`; `numerators[δ]` rescales the weight factor at
/// offset `δ` (all ones for raw Horvitz–Thompson weights).
pub fn ipw_pseudo_outcomes(
    traj: &Trajectory,
    probs: &Array2<f64>,
    a_bar: &Array2<f64>,
    numerators: &[f64],
) -> Result<Vec<IpwPseudoOutcome>> {
    let tau = a_bar.nrows();
    if tau == 0 {
        return Err(Error::contract("ipw_pseudo_outcomes", "treatment sequence is empty"));
    }
    if probs.dim() != (traj.len(), traj.a.ncols()) {
        return Err(Error::shape(
            "ipw_pseudo_outcomes",
            format!(
                "propensities are {:?}, expected [{}, {}]",
                probs.dim(),
                traj.len(),
                traj.a.ncols()
            ),
        ));
    }
    if a_bar.ncols() != traj.a.ncols() {
        return Err(Error::shape(
            "ipw_pseudo_outcomes",
            format!("sequence has {} treatment dims, trajectory {}", a_bar.ncols(), traj.a.ncols()),
        ));
    }
    if a_bar.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::contract("ipw_pseudo_outcomes", "treatments must be 0/1"));
    }
    if numerators.len() != tau {
        return Err(Error::contract(
            "ipw_pseudo_outcomes",
            format!("{} numerators for horizon {}", numerators.len(), tau),
        ));
    }

    let mut out = Vec::new();
    for t in loss_steps(traj.len(), tau) {
        let mut weight = 1.0;
        for d in 0..tau {
            let matched = (0..a_bar.ncols()).all(|j| traj.a[[t + d, j]] == a_bar[[d, j]]);
            if !matched {
                weight = 0.0;
                break;
            }
            weight *= numerators[d] / treatment_row_prob(probs.row(t + d), a_bar.row(d));
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::numeric(
                "ipw_pseudo_outcomes",
                format!("weight {weight} at step {t}; are the propensities clipped away from 0?"),
            ));
        }
        let value = traj.y.row(t + tau).iter().map(|y| weight * y).collect();
        out.push(IpwPseudoOutcome { t, weight, value });
    }
    Ok(out)
}

/// A fitted weighted regression for one fixed treatment sequence.
#[derive(Debug, Clone)]
pub struct IpwModel {
    pub config: IpwConfig,
    pub dims: HistoryDims,
    /// The `[τ, d_a]` sequence this model answers queries about.
    pub a_bar: Array2<f64>,
    pub standardizer: Standardizer,
    pub store: ParamStore,
    backbone: Backbone,
    head: HeadParams,
}

impl IpwModel {
    /// Expected outcome `τ` steps after `t` under this model's treatment
    /// sequence, given the history up to `t`.
    pub fn predict_capo(&self, traj: &Trajectory, t: usize) -> Result<Vec<f64>> {
        if t >= traj.len() {
            return Err(Error::contract(
                "predict_capo",
                format!("conditioning step {t} outside trajectory of length {}", traj.len()),
            ));
        }
        let std_traj = self.standardizer.apply(traj);
        let slice = HistorySlice::factual(&std_traj, t)?;
        let g = Graph::new();
        let mut binder = Binder::new(&g, &self.store);
        let mut rng = StreamRng::new(0, "ipw-eval");
        let z = self.backbone.forward(&g, &mut binder, &self.store, &slice, false, &mut rng)?;
        let z_t = g.slice(&z, 0, t, t + 1)?;
        let pred = self.head.forward(&g, &mut binder, &self.store, &z_t, 0.0, false, &mut rng)?;
        let row: Vec<f64> = pred.data().iter().copied().collect();
        Ok(self.standardizer.destandardize_y(&row))
    }
}

/// A fitted model plus its training diagnostics.
#[derive(Debug, Clone)]
pub struct IpwFit {
    pub model: IpwModel,
    pub loss_history: Vec<f64>,
    /// Batches in which no row's factual treatments matched the query.
    pub skipped_batches: usize,
    /// Trajectories too short to contribute any conditioning step.
    pub skipped_short: usize,
}

/// Regresses inverse-propensity-weighted outcomes on the encoded history.
///
/// The propensity model must come from a different split than `dataset`
/// (honest splitting): reusing the outcome data to estimate its own
/// weights lets estimation errors correlate and biases the fit.
pub fn ipw_regress(
    dataset: &Dataset,
    propensity: &PropensityModel,
    a_bar: &Array2<f64>,
    config: &IpwConfig,
) -> Result<IpwFit> {
    config.validate()?;
    if propensity.fit_split == dataset.split_label {
        return Err(Error::contract(
            "ipw_regress",
            format!(
                "propensity model was fitted on split {:?}, the same split as the outcome data; \
                 fit it on a disjoint split",
                propensity.fit_split
            ),
        ));
    }
    let dims = HistoryDims::of_dataset(dataset);
    if dims != propensity.dims {
        return Err(Error::contract(
            "ipw_regress",
            format!("propensity dims {:?} do not match dataset dims {dims:?}", propensity.dims),
        ));
    }
    if a_bar.dim() != (config.tau, dims.d_a) {
        return Err(Error::shape(
            "ipw_regress",
            format!("sequence is {:?}, expected [{}, {}]", a_bar.dim(), config.tau, dims.d_a),
        ));
    }
    if a_bar.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::contract("ipw_regress", "treatments must be 0/1"));
    }

    let numerators = if config.stabilize() {
        // Empirical marginal rate per treatment dimension, pooled over all
        // steps; the numerator is the marginal probability of each queried
        // row, which cancels the bulk of the inverse weight's scale.
        let mut rates = vec![0.0; dims.d_a];
        let mut n = 0usize;
        for tr in &dataset.trajectories {
            for row in tr.a.rows() {
                for (j, v) in row.iter().enumerate() {
                    rates[j] += v;
                }
                n += 1;
            }
        }
        let rates = ndarray::Array1::from_iter(rates.into_iter().map(|s| s / n as f64));
        (0..config.tau).map(|d| treatment_row_prob(rates.view(), a_bar.row(d))).collect()
    } else {
        vec![1.0; config.tau]
    };

    let standardizer = Standardizer::fit(dataset);
    let tau = config.tau;
    let mut kept: Vec<(HistorySlice, std::ops::Range<usize>, Arr, bool)> = Vec::new();
    let mut skipped_short = 0usize;
    for tr in &dataset.trajectories {
        let steps = loss_steps(tr.len(), tau);
        if steps.is_empty() {
            skipped_short += 1;
            continue;
        }
        let probs = propensity.predict_probs(tr)?;
        let pseudo = ipw_pseudo_outcomes(tr, &probs, a_bar, &numerators)?;
        let mut target = Array2::zeros((pseudo.len(), dims.d_y));
        let mut any_weight = false;
        for (i, p) in pseudo.iter().enumerate() {
            // W·Y in standardized-outcome units: the same affine map as the
            // inputs' outcome columns, so the head sees one scale.
            for (j, v) in standardizer.standardize_y(&p.value).iter().enumerate() {
                target[[i, j]] = *v;
            }
            any_weight |= p.weight != 0.0;
        }
        let slice = HistorySlice::factual(&standardizer.apply(tr), tr.len() - 1)?;
        kept.push((slice, steps, target.into_dyn(), any_weight));
    }
    if kept.is_empty() {
        return Err(Error::contract(
            "ipw_regress",
            format!("no trajectory has the >= tau+2 = {} steps a fit needs", tau + 2),
        ));
    }

    let mut store = ParamStore::new(config.schedule.seed);
    let backbone = Backbone::register(&mut store, "enc", config.backbone.clone(), dims)?;
    let head = HeadParams::register(
        &mut store,
        "head0",
        config.backbone.d_z,
        config.head_hidden,
        dims.d_y,
    );
    let dropout = config.backbone.dropout;
    let (store, loss_history, skipped_batches) = run_sgd(
        store,
        kept.len(),
        &config.schedule,
        "ipw_regress",
        |g, binder, store, pos, rng| {
            let (slice, steps, target, _) = &kept[pos];
            let z = backbone.forward(g, binder, store, slice, true, rng)?;
            let z_steps = g.slice(&z, 0, steps.start, steps.end)?;
            let pred = head.forward(g, binder, store, &z_steps, dropout, true, rng)?;
            g.mse(&pred, &Tensor::constant(target.clone()))
        },
        |batch| batch.iter().all(|pos| !kept[*pos].3),
    )?;

    let model = IpwModel {
        config: config.clone(),
        dims,
        a_bar: a_bar.clone(),
        standardizer,
        store,
        backbone,
        head,
    };
    Ok(IpwFit { model, loss_history, skipped_batches, skipped_short })
}
