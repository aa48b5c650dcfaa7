//! Monte-Carlo plug-in G-computation.
//!
//! Fits two one-step models on factual transitions: a Gaussian density
//! over the next step's covariates and outcome given `(Z_s, A_s)`, and a
//! point regression of the next outcome on the same input. A query is then
//! answered by *simulation*: roll the density forward `τ−1` steps under the
//! interventional treatments, re-encoding the growing history each step,
//! and read the outcome regression at the final step, averaging over `K`
//! sampled paths.
//!
//! Unlike iterated regression, the plug-in needs the full transition
//! density — misspecify it and every simulated step compounds the error;
//! sample too little and the Monte-Carlo noise scales as `1/√K`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Binder, Graph, ParamStore, StreamRng, Tensor};
use crate::backbone::{Backbone, BackboneConfig, HistoryDims, HistorySlice};
use crate::datagen::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::model::{HeadParams, Standardizer};

use super::{run_sgd, FitSchedule};

/// Diagonal-Gaussian read-out: two heads share an input and emit the mean
/// and log-variance per output dimension.
#[derive(Debug, Clone)]
pub struct DensityHead {
    pub mean: HeadParams,
    pub logvar: HeadParams,
}

impl DensityHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        DensityHead {
            mean: HeadParams::register(store, &format!("{prefix}/mean"), d_in, hidden, d_out),
            logvar: HeadParams::register(store, &format!("{prefix}/logvar"), d_in, hidden, d_out),
        }
    }

    /// `[N, d_in] -> (mean [N, d_out], log-variance [N, d_out])`. The
    /// variance `exp(logvar)` is positive by construction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &Graph,
        binder: &mut Binder,
        store: &ParamStore,
        input: &Tensor,
        dropout: f64,
        train: bool,
        rng: &mut StreamRng,
    ) -> Result<(Tensor, Tensor)> {
        let mean = self.mean.forward(g, binder, store, input, dropout, train, rng)?;
        let logvar = self.logvar.forward(g, binder, store, input, dropout, train, rng)?;
        Ok((mean, logvar))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McGcompConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    /// Prediction horizon τ ≥ 1 (τ−1 simulated transitions per path).
    pub tau: usize,
    pub schedule: FitSchedule,
}

impl Default for McGcompConfig {
    fn default() -> Self {
        McGcompConfig {
            backbone: BackboneConfig::default(),
            head_hidden: 32,
            tau: 2,
            schedule: FitSchedule::default(),
        }
    }
}

impl McGcompConfig {
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
}

/// Fitted one-step transition density + outcome regression.
#[derive(Debug, Clone)]
pub struct McGcompModel {
    pub config: McGcompConfig,
    pub dims: HistoryDims,
    pub standardizer: Standardizer,
    pub store: ParamStore,
    backbone: Backbone,
    /// Next-step `(X, Y)` density given `(Z_s, A_s)`; covariate columns
    /// first, outcome columns last.
    density: DensityHead,
    /// Next-step `E[Y]` given `(Z_s, A_s)`, read at the final rollout step.
    outcome: HeadParams,
}

/// A fitted model plus its training diagnostics.
#[derive(Debug, Clone)]
pub struct McGcompFit {
    pub model: McGcompModel,
    /// Per-epoch mean of (density negative log-likelihood + outcome MSE).
    pub loss_history: Vec<f64>,
    /// Trajectories with no transition to fit on (single step).
    pub skipped_short: usize,
}

impl McGcompModel {
    fn new(config: McGcompConfig, dims: HistoryDims, standardizer: Standardizer) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.schedule.seed);
        let backbone = Backbone::register(&mut store, "enc", config.backbone.clone(), dims)?;
        let d_in = config.backbone.d_z + dims.d_a;
        let density =
            DensityHead::register(&mut store, "dens", d_in, config.head_hidden, dims.d_x + dims.d_y);
        let outcome = HeadParams::register(&mut store, "out", d_in, config.head_hidden, dims.d_y);
        Ok(McGcompModel { config, dims, standardizer, store, backbone, density, outcome })
    }

    /// CAPO estimate by simulation: sample `draws` covariate paths under
    /// `a_bar`, average the final-step outcome regression over them. With
    /// τ = 1 no transition is simulated and the answer is deterministic.
    pub fn predict_capo(
        &self,
        traj: &Trajectory,
        t: usize,
        a_bar: &Array2<f64>,
        draws: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if draws == 0 {
            return Err(Error::contract("mc_gcomp", "need at least one draw"));
        }
        if a_bar.dim() != (self.config.tau, self.dims.d_a) {
            return Err(Error::shape(
                "mc_gcomp",
                format!(
                    "sequence is {:?}, expected [{}, {}]",
                    a_bar.dim(),
                    self.config.tau,
                    self.dims.d_a
                ),
            ));
        }
        if a_bar.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::contract("mc_gcomp", "treatments must be 0/1"));
        }
        if t >= traj.len() {
            return Err(Error::contract(
                "mc_gcomp",
                format!("conditioning step {t} outside trajectory of length {}", traj.len()),
            ));
        }
        let tau = self.config.tau;
        let std_traj = self.standardizer.apply(traj);
        let base = HistorySlice::factual(&std_traj, t)?.padded_to(t + tau)?;

        // τ = 1 reads the outcome head off the factual encoding directly;
        // no sampled transition, hence no dependence on draws or seed.
        let draws_run = if tau == 1 { 1 } else { draws };
        let rollouts: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            (0..draws_run)
                .into_par_iter()
                .map(|i| {
                    let mut rng = StreamRng::new(seed, "mc-rollout").substream_idx("draw", i as u64);
                    self.rollout(&base, t, a_bar, &std_traj.statics, &mut rng)
                })
                .collect::<Result<_>>()?
        };
        let mut mean = vec![0.0; self.dims.d_y];
        for path in &rollouts {
            for (m, v) in mean.iter_mut().zip(path) {
                *m += v / draws_run as f64;
            }
        }
        Ok(self.standardizer.destandardize_y(&mean))
    }

    /// One simulated path in standardized units.
    fn rollout(
        &self,
        base: &HistorySlice,
        t: usize,
        a_bar: &Array2<f64>,
        statics: &[f64],
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        let tau = self.config.tau;
        let (d_x, d_y) = (self.dims.d_x, self.dims.d_y);
        let mut slice = base.clone();
        let mut eval_rng = StreamRng::new(0, "mc-eval");
        for d in 0..tau - 1 {
            let g = Graph::new();
            let mut binder = Binder::new(&g, &self.store);
            let z =
                self.backbone.forward(&g, &mut binder, &self.store, &slice, false, &mut eval_rng)?;
            let z_row = g.slice(&z, 0, t + d, t + d + 1)?;
            let a_row = Tensor::constant(a_bar.slice(ndarray::s![d..d + 1, ..]).to_owned().into_dyn());
            let input = g.concat(&[&z_row, &a_row], 1)?;
            let (mean, logvar) = self.density.forward(
                &g,
                &mut binder,
                &self.store,
                &input,
                0.0,
                false,
                &mut eval_rng,
            )?;
            let (mean, logvar) = (mean.data(), logvar.data());
            let row = t + d + 1;
            for j in 0..d_x + d_y {
                let v = mean[[0, j]] + (0.5 * logvar[[0, j]]).exp() * rng.gauss();
                if !v.is_finite() {
                    return Err(Error::numeric(
                        "mc_gcomp",
                        format!("non-finite sample at rollout step {d}, dimension {j}"),
                    ));
                }
                if j < d_x {
                    slice.x[[row, j]] = v;
                } else {
                    slice.y[[row, j - d_x]] = v;
                }
            }
            for (k, s) in statics.iter().enumerate() {
                slice.x[[row, d_x + k]] = *s;
            }
            for j in 0..self.dims.d_a {
                slice.a_prev[[row, j]] = a_bar[[d, j]];
            }
            slice.mask[row] = 1.0;
        }

        let g = Graph::new();
        let mut binder = Binder::new(&g, &self.store);
        let z = self.backbone.forward(&g, &mut binder, &self.store, &slice, false, &mut eval_rng)?;
        let z_row = g.slice(&z, 0, t + tau - 1, t + tau)?;
        let a_row =
            Tensor::constant(a_bar.slice(ndarray::s![tau - 1..tau, ..]).to_owned().into_dyn());
        let input = g.concat(&[&z_row, &a_row], 1)?;
        let out =
            self.outcome.forward(&g, &mut binder, &self.store, &input, 0.0, false, &mut eval_rng)?;
        Ok(out.data().iter().copied().collect())
    }
}

/// Mean diagonal-Gaussian negative log-likelihood:
/// `0.5 · mean(logvar + (target − mean)² · exp(−logvar)) + 0.5 · ln 2π`.
fn gaussian_nll(g: &Graph, mean: &Tensor, logvar: &Tensor, target: &Arr) -> Result<Tensor> {
    let diff = g.sub(mean, &Tensor::constant(target.clone()))?;
    let sq = g.mul(&diff, &diff)?;
    let inv_var = g.exp(&g.affine(logvar, -1.0, 0.0)?)?;
    let inner = g.add(logvar, &g.mul(&sq, &inv_var)?)?;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    g.affine(&g.mean(&inner)?, 0.5, 0.5 * ln_2pi)
}

/// Fits the one-step density and outcome regression on factual transitions.
pub fn mc_gcomp(dataset: &Dataset, config: &McGcompConfig) -> Result<McGcompFit> {
    config.validate()?;
    let dims = HistoryDims::of_dataset(dataset);
    let standardizer = Standardizer::fit(dataset);
    let model = McGcompModel::new(config.clone(), dims, standardizer)?;

    let mut kept: Vec<(HistorySlice, Arr, Arr, Arr)> = Vec::new();
    let mut skipped_short = 0usize;
    for tr in &dataset.trajectories {
        if tr.len() < 2 {
            skipped_short += 1;
            continue;
        }
        let std_tr = model.standardizer.apply(tr);
        let t_len = std_tr.len();
        let slice = HistorySlice::factual(&std_tr, t_len - 1)?;
        let a_in = std_tr.a.slice(ndarray::s![..t_len - 1, ..]).to_owned().into_dyn();
        let mut next = Array2::zeros((t_len - 1, dims.d_x + dims.d_y));
        for s in 0..t_len - 1 {
            for j in 0..dims.d_x {
                next[[s, j]] = std_tr.x[[s + 1, j]];
            }
            for j in 0..dims.d_y {
                next[[s, dims.d_x + j]] = std_tr.y[[s + 1, j]];
            }
        }
        let next_y = std_tr.y.slice(ndarray::s![1.., ..]).to_owned().into_dyn();
        kept.push((slice, a_in, next.into_dyn(), next_y));
    }
    if kept.is_empty() {
        return Err(Error::contract(
            "mc_gcomp",
            "no trajectory has the >= 2 steps a transition fit needs",
        ));
    }

    let McGcompModel { config, dims, standardizer, store, backbone, density, outcome } = model;
    let dropout = config.backbone.dropout;
    let (store, loss_history, _) = run_sgd(
        store,
        kept.len(),
        &config.schedule,
        "mc_gcomp",
        |g, binder, store, pos, rng| {
            let (slice, a_in, next, next_y) = &kept[pos];
            let z = backbone.forward(g, binder, store, slice, true, rng)?;
            let z_in = g.slice(&z, 0, 0, slice.len() - 1)?;
            let input = g.concat(&[&z_in, &Tensor::constant(a_in.clone())], 1)?;
            let (mean, logvar) = density.forward(g, binder, store, &input, dropout, true, rng)?;
            let nll = gaussian_nll(g, &mean, &logvar, next)?;
            let pred = outcome.forward(g, binder, store, &input, dropout, true, rng)?;
            let mse = g.mse(&pred, &Tensor::constant(next_y.clone()))?;
            g.add(&nll, &mse)
        },
        |_| false,
    )?;

    let model = McGcompModel { config, dims, standardizer, store, backbone, density, outcome };
    Ok(McGcompFit { model, loss_history, skipped_short })
}
