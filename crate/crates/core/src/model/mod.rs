//! Iterative G-computation estimation of conditional average potential
//! outcomes (CAPOs).
//!
//! The estimator carries a sequence backbone and one regression head per
//! horizon offset δ ∈ 0..τ. Training alternates two passes over each
//! trajectory:
//!
//! * **generation** — with the current weights, evaluation-mode forward
//!   passes on treatment-substituted histories produce detached
//!   pseudo-outcomes `G̃_{t+δ}` for δ = 1..τ−1; the final target
//!   `G̃_{t+τ}` is the observed outcome itself;
//! * **learning** — heads regress those targets on *factual* encodings
//!   `(Z_{t+δ}, A_{t+δ})`, and one optimizer step updates backbone and
//!   heads jointly.
//!
//! Under sequential ignorability the head at δ = 0 converges to the
//! G-computation formula — the nested conditional expectation over future
//! confounders — rather than to the confounded conditional expectation
//! that a direct regression on `(history, ā)` estimates.
//!
//! At inference [`IgcModel::predict_capo`] encodes the factual history and
//! reads head 0 at the first interventional treatment; later treatments of
//! `ā` were consumed during training. Two ablation objectives share the
//! same plumbing (see [`Objective`]): a biased variant whose heads all
//! regress the factual `Y_{t+τ}` directly, and a plain history regressor
//! used as a baseline. At τ = 1 all three coincide and the trainer is
//! bit-identical across them.
//!
//! Outcomes and covariates are standardized by training-set statistics
//! ([`Standardizer`]); pseudo-outcomes live in standardized units and
//! predictions are mapped back.

pub mod trainer;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Graph, ParamId, ParamStore, StreamRng, Tensor};
use crate::backbone::{Backbone, BackboneConfig, HistoryDims, HistorySlice};
use crate::datagen::{Dataset, Trajectory};
use crate::error::{Error, Result};

pub use trainer::{
    train, train_biased_ablation, train_with_objective, InterventionPolicy, TrainConfig,
    TrainOutcome,
};

/// Per-dimension shift/scale fitted on a training split. Constant
/// dimensions keep scale 1 so transforms stay invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
}

impl Standardizer {
    /// No-op transform (means 0, scales 1), for hand-built fixtures.
    pub fn identity(d_y: usize, d_x: usize) -> Self {
        Standardizer {
            y_mean: vec![0.0; d_y],
            y_std: vec![1.0; d_y],
            x_mean: vec![0.0; d_x],
            x_std: vec![1.0; d_x],
        }
    }

    /// Pools every step of every trajectory; population standard deviation,
    /// with constant dimensions mapped to scale 1.
    pub fn fit(ds: &Dataset) -> Self {
        let fit_dim = |get: &dyn Fn(&Trajectory) -> &Array2<f64>, d: usize| {
            let mut mean = vec![0.0; d];
            let mut std = vec![1.0; d];
            let n: usize = ds.trajectories.iter().map(|tr| tr.len()).sum();
            if n == 0 || d == 0 {
                return (mean, std);
            }
            for k in 0..d {
                let sum: f64 = ds.trajectories.iter().map(|tr| get(tr).column(k).sum()).sum();
                let m = sum / n as f64;
                let ss: f64 = ds
                    .trajectories
                    .iter()
                    .map(|tr| get(tr).column(k).iter().map(|v| (v - m).powi(2)).sum::<f64>())
                    .sum();
                let sd = (ss / n as f64).sqrt();
                mean[k] = m;
                std[k] = if sd < 1e-12 { 1.0 } else { sd };
            }
            (mean, std)
        };
        let (y_mean, y_std) = fit_dim(&|tr| &tr.y, ds.d_y);
        let (x_mean, x_std) = fit_dim(&|tr| &tr.x, ds.d_x);
        Standardizer { y_mean, y_std, x_mean, x_std }
    }

    /// Returns a copy of `traj` with outcomes and covariates standardized;
    /// treatments, statics, and bookkeeping fields pass through.
    pub fn apply(&self, traj: &Trajectory) -> Trajectory {
        let mut out = traj.clone();
        for mut row in out.y.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.y_mean[k]) / self.y_std[k];
            }
        }
        for mut row in out.x.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.x_mean[k]) / self.x_std[k];
            }
        }
        out
    }

    pub fn standardize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(k, v)| (v - self.y_mean[k]) / self.y_std[k]).collect()
    }

    pub fn destandardize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(k, v)| v * self.y_std[k] + self.y_mean[k]).collect()
    }
}

/// One read-out head: `Linear → ELU → dropout → Linear`.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_y: usize,
    ) -> Self {
        HeadParams {
            w1: store.add_glorot(&format!("{prefix}/w1"), d_in, hidden),
            b1: store.add_zeros(&format!("{prefix}/b1"), &[hidden]),
            w2: store.add_glorot(&format!("{prefix}/w2"), hidden, d_y),
            b2: store.add_zeros(&format!("{prefix}/b2"), &[d_y]),
        }
    }

    /// `[N, d_in] -> [N, d_y]`.
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
    ) -> Result<Tensor> {
        let pre = g.add(&g.matmul(input, &binder.get(store, self.w1))?, &binder.get(store, self.b1))?;
        let h = g.dropout(&g.elu(&pre, 1.0)?, dropout, train, rng)?;
        g.add(&g.matmul(&h, &binder.get(store, self.w2))?, &binder.get(store, self.b2))
    }
}

/// What the heads regress during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Iterative G-computation: heads chase self-generated pseudo-outcomes.
    Igc,
    /// Ablation: every head regresses the factual `Y_{t+τ}` directly,
    /// estimating the confounded conditional expectation.
    BiasedAblation,
    /// Baseline: a single head regresses `Y_{t+τ}` on
    /// `(Z_t, flattened treatment sequence)`.
    HistoryRegression,
}

/// Architecture hyperparameters (the training schedule lives in
/// [`TrainConfig`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    /// Prediction horizon τ ≥ 1: the model estimates outcomes `τ` steps
    /// ahead under a length-τ interventional treatment sequence.
    pub tau: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), head_hidden: 32, tau: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("horizon tau must be >= 1".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be >= 1".into()));
        }
        self.backbone.validate()
    }

    /// Shared dropout rate (heads reuse the backbone's rate).
    pub fn dropout(&self) -> f64 {
        self.backbone.dropout
    }
}

/// A configured estimator: backbone + per-horizon heads + the input
/// standardizer it was trained with.
#[derive(Debug, Clone)]
pub struct IgcModel {
    pub config: ModelConfig,
    pub dims: HistoryDims,
    pub standardizer: Standardizer,
    pub objective: Objective,
    pub store: ParamStore,
    backbone: Backbone,
    heads: Vec<HeadParams>,
}

impl IgcModel {
    /// Registers all weights from the seed's named init streams.
    pub fn new(
        config: ModelConfig,
        dims: HistoryDims,
        standardizer: Standardizer,
        seed: u64,
        objective: Objective,
    ) -> Result<Self> {
        config.validate()?;
        if standardizer.y_mean.len() != dims.d_y || standardizer.x_mean.len() != dims.d_x {
            return Err(Error::shape("igc_model", "standardizer dims disagree with data dims"));
        }
        let mut store = ParamStore::new(seed);
        let backbone = Backbone::register(&mut store, "enc", config.backbone.clone(), dims)?;
        let n_heads = match objective {
            Objective::HistoryRegression => 1,
            _ => config.tau,
        };
        let head_in = config.backbone.d_z + dims.d_a * self::treatment_steps(objective, config.tau);
        let heads = (0..n_heads)
            .map(|d| {
                HeadParams::register(
                    &mut store,
                    &format!("head{d}"),
                    head_in,
                    config.head_hidden,
                    dims.d_y,
                )
            })
            .collect();
        Ok(IgcModel { config, dims, standardizer, objective, store, backbone, heads })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    fn check_intervention(&self, a_bar: &Array2<f64>) -> Result<()> {
        if a_bar.nrows() != self.config.tau || a_bar.ncols() != self.dims.d_a {
            return Err(Error::contract(
                "igc_model",
                format!(
                    "intervention sequence is {}x{}, model expects {}x{}",
                    a_bar.nrows(),
                    a_bar.ncols(),
                    self.config.tau,
                    self.dims.d_a
                ),
            ));
        }
        if a_bar.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::contract("igc_model", "intervention treatments must be 0/1"));
        }
        Ok(())
    }

    /// Head input for prediction: the first interventional treatment for
    /// per-horizon heads, the whole flattened sequence for the history
    /// regressor.
    fn prediction_treatments(&self, a_bar: &Array2<f64>) -> Array2<f64> {
        match self.objective {
            Objective::HistoryRegression => flatten_rows(a_bar),
            _ => a_bar.slice(s![0..1, ..]).to_owned(),
        }
    }

    /// CAPO estimate in raw outcome units: encode the factual history
    /// through `t`, read head 0 at the interventional treatment.
    pub fn predict_capo(&self, traj: &Trajectory, t: usize, a_bar: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_intervention(a_bar)?;
        if t >= traj.len() {
            return Err(Error::contract(
                "predict_capo",
                format!("t {t} outside trajectory of length {}", traj.len()),
            ));
        }
        let mut rng = StreamRng::new(0, "predict-eval");
        let out = self.forward_query(traj, t, a_bar, false, &mut rng)?;
        Ok(self.standardizer.destandardize_y(&out))
    }

    /// One forward pass of the query head; standardized output units.
    fn forward_query(
        &self,
        traj: &Trajectory,
        t: usize,
        a_bar: &Array2<f64>,
        train: bool,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        let std_traj = self.standardizer.apply(traj);
        let slice = HistorySlice::factual(&std_traj, t)?;
        let g = Graph::new();
        let mut binder = Binder::new(&g, &self.store);
        let z = self.backbone.forward(&g, &mut binder, &self.store, &slice, train, rng)?;
        let row = g.slice(&z, 0, t, t + 1)?;
        let a_in = Tensor::constant(self.prediction_treatments(a_bar).into_dyn());
        let input = g.concat(&[&row, &a_in], 1)?;
        let out = self.heads[0].forward(
            &g,
            &mut binder,
            &self.store,
            &input,
            self.config.dropout(),
            train,
            rng,
        )?;
        Ok(out.data().iter().copied().collect())
    }

    /// Monte-Carlo dropout uncertainty: `k` stochastic forward passes with
    /// dropout active. With a zero dropout rate the spread is exactly zero
    /// and the result is flagged degenerate.
    pub fn predict_with_uncertainty(
        &self,
        traj: &Trajectory,
        t: usize,
        a_bar: &Array2<f64>,
        k: usize,
        quantiles: &[f64],
        seed: u64,
    ) -> Result<Uncertainty> {
        self.check_intervention(a_bar)?;
        if k < 2 {
            return Err(Error::contract("predict_with_uncertainty", "need at least 2 draws"));
        }
        if quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::contract("predict_with_uncertainty", "quantiles must lie in [0,1]"));
        }
        let d_y = self.dims.d_y;
        // With no dropout every draw is the same forward pass; answer with
        // the point prediction and an exact zero spread instead of paying
        // for `k` passes and accumulating rounding noise.
        if self.config.dropout() == 0.0 {
            let point = self.predict_capo(traj, t, a_bar)?;
            let quantiles = quantiles.iter().map(|&q| (q, point.clone())).collect();
            return Ok(Uncertainty {
                mean: point,
                std: vec![0.0; d_y],
                quantiles,
                degenerate: true,
            });
        }
        let base = StreamRng::new(seed, "mc-dropout");
        let mut draws = Vec::with_capacity(k);
        for i in 0..k {
            let mut rng = base.substream_idx("draw", i as u64);
            let out = self.forward_query(traj, t, a_bar, true, &mut rng)?;
            draws.push(self.standardizer.destandardize_y(&out));
        }
        let mut mean = vec![0.0; d_y];
        for d in &draws {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v / k as f64;
            }
        }
        let mut std = vec![0.0; d_y];
        for d in &draws {
            for (s, (v, m)) in std.iter_mut().zip(d.iter().zip(&mean)) {
                *s += (v - m).powi(2);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / (k as f64 - 1.0)).sqrt();
        }
        let quantiles = quantiles
            .iter()
            .map(|&q| {
                let vals = (0..d_y)
                    .map(|dim| {
                        let mut col: Vec<f64> = draws.iter().map(|d| d[dim]).collect();
                        col.sort_by(f64::total_cmp);
                        let pos = q * (k - 1) as f64;
                        let lo = pos.floor() as usize;
                        let frac = pos - lo as f64;
                        if lo + 1 < k {
                            col[lo] * (1.0 - frac) + col[lo + 1] * frac
                        } else {
                            col[lo]
                        }
                    })
                    .collect();
                (q, vals)
            })
            .collect();
        Ok(Uncertainty { mean, std, quantiles, degenerate: false })
    }
}

/// Empirical summary of MC-dropout draws (raw outcome units).
#[derive(Debug, Clone)]
pub struct Uncertainty {
    pub mean: Vec<f64>,
    /// Sample standard deviation over draws.
    pub std: Vec<f64>,
    pub quantiles: Vec<(f64, Vec<f64>)>,
    /// True when the model's dropout rate is zero, making the spread
    /// structurally zero.
    pub degenerate: bool,
}

/// Regression targets for one conditioning step `t`, in standardized
/// outcome units and detached by construction (plain numbers, never graph
/// nodes).
///
/// `entries[k]` holds `G̃_{t+k+1}` — the target of head `k`. Entries
/// `k < τ−1` are produced by evaluation-mode forward passes of heads
/// `k+1` on treatment-substituted encodings (plus any corruption bias);
/// the final entry is the standardized factual outcome `Y_{t+τ}`, never
/// corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub t: usize,
    pub entries: Vec<Vec<f64>>,
}

/// Pseudo-outcome generation for one conditioning step of a raw-unit
/// trajectory. See [`PseudoOutcomes`] for the layout.
pub fn generation_step(
    model: &IgcModel,
    traj: &Trajectory,
    t: usize,
    a_bar: &Array2<f64>,
    corruption_bias: f64,
) -> Result<PseudoOutcomes> {
    let std_traj = model.standardizer.apply(traj);
    generation_step_std(model, &std_traj, t, a_bar, corruption_bias)
}

/// Generation on an already-standardized trajectory (the trainer's path;
/// [`generation_step`] is the raw-unit wrapper).
pub(crate) fn generation_step_std(
    model: &IgcModel,
    std_traj: &Trajectory,
    t: usize,
    a_bar: &Array2<f64>,
    corruption_bias: f64,
) -> Result<PseudoOutcomes> {
    if model.objective == Objective::HistoryRegression {
        return Err(Error::contract(
            "generation_step",
            "history-regression models have no per-horizon heads",
        ));
    }
    model.check_intervention(a_bar)?;
    if corruption_bias.is_nan() || corruption_bias < 0.0 {
        return Err(Error::contract("generation_step", "corruption bias must be >= 0"));
    }
    let tau = model.config.tau;
    if t + tau >= std_traj.len() {
        return Err(Error::contract(
            "generation_step",
            format!("horizon overflow: t {t} + tau {tau} beyond length {}", std_traj.len()),
        ));
    }
    let mut entries = vec![Vec::new(); tau];
    entries[tau - 1] = std_traj.y.row(t + tau).to_vec();
    if tau >= 2 {
        let g = Graph::new();
        let mut binder = Binder::new(&g, &model.store);
        let mut rng = StreamRng::new(0, "generation-eval");
        for delta in 1..tau {
            let hs = crate::backbone::encode_history(
                &g,
                &mut binder,
                &model.store,
                &model.backbone,
                std_traj,
                t,
                delta,
                Some(a_bar),
                false,
                &mut rng,
            )?;
            let row = g.slice(&hs.z, 0, t + delta, t + delta + 1)?;
            let a_row =
                Tensor::constant(a_bar.row(delta).insert_axis(Axis(0)).to_owned().into_dyn());
            let input = g.concat(&[&row, &a_row], 1)?;
            let out = model.heads[delta].forward(
                &g,
                &mut binder,
                &model.store,
                &input,
                0.0,
                false,
                &mut rng,
            )?;
            entries[delta - 1] = out.data().iter().map(|v| v + corruption_bias).collect();
        }
    }
    Ok(PseudoOutcomes { t, entries })
}

/// Number of treatment steps a head input carries under each objective.
fn treatment_steps(objective: Objective, tau: usize) -> usize {
    match objective {
        Objective::HistoryRegression => tau,
        _ => 1,
    }
}

/// Conditioning steps contributing to the loss: `1..=T−1−τ` (the first
/// step has no prior transition to condition on).
pub(crate) fn loss_steps(t_len: usize, tau: usize) -> std::ops::Range<usize> {
    if t_len < tau + 2 {
        1..1
    } else {
        1..t_len - tau
    }
}

/// Flattens `[r, c]` into `[1, r·c]` row-major.
fn flatten_rows(a: &Array2<f64>) -> Array2<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    Array2::from_shape_vec((1, flat.len()), flat).expect("row-major flatten")
}

/// The attached training loss for one standardized trajectory: factual
/// encodings, one squared-error term per (conditioning step, head),
/// averaged within each head then across heads. Returns the scalar loss
/// and a per-head finiteness flag for failure attribution.
pub(crate) fn objective_loss(
    g: &Graph,
    binder: &mut Binder,
    model: &IgcModel,
    std_traj: &Trajectory,
    targets: &[Array2<f64>],
    train: bool,
    rng: &mut StreamRng,
) -> Result<(Tensor, Vec<bool>)> {
    let tau = model.config.tau;
    let t_len = std_traj.len();
    let steps = loss_steps(t_len, tau);
    let n_t = steps.len();
    if n_t == 0 {
        return Err(Error::contract(
            "learning_loss",
            format!("trajectory length {t_len} leaves no conditioning steps at tau {tau}"),
        ));
    }
    if targets.len() != model.heads.len() {
        return Err(Error::contract(
            "learning_loss",
            format!("{} target blocks for {} heads", targets.len(), model.heads.len()),
        ));
    }
    let slice = HistorySlice::factual(std_traj, t_len - 1)?;
    let z = model.backbone.forward(g, binder, &model.store, &slice, train, rng)?;
    let mut finite = Vec::with_capacity(model.heads.len());
    let mut acc: Option<Tensor> = None;
    for (k, head) in model.heads.iter().enumerate() {
        let target = &targets[k];
        if target.nrows() != n_t || target.ncols() != model.dims.d_y {
            return Err(Error::shape(
                "learning_loss",
                format!(
                    "target block {k} is {}x{}, expected {n_t}x{}",
                    target.nrows(),
                    target.ncols(),
                    model.dims.d_y
                ),
            ));
        }
        let (z_rows, a_block) = match model.objective {
            Objective::HistoryRegression => {
                let mut a_block = Array2::zeros((n_t, tau * model.dims.d_a));
                for (i, t) in steps.clone().enumerate() {
                    for delta in 0..tau {
                        for j in 0..model.dims.d_a {
                            a_block[[i, delta * model.dims.d_a + j]] = std_traj.a[[t + delta, j]];
                        }
                    }
                }
                (g.slice(&z, 0, steps.start, steps.end)?, a_block)
            }
            _ => (
                g.slice(&z, 0, steps.start + k, steps.end + k)?,
                std_traj.a.slice(s![steps.start + k..steps.end + k, ..]).to_owned(),
            ),
        };
        let input = g.concat(&[&z_rows, &Tensor::constant(a_block.into_dyn())], 1)?;
        let pred =
            head.forward(g, binder, &model.store, &input, model.config.dropout(), train, rng)?;
        let m = g.mse(&pred, &Tensor::constant(target.clone().into_dyn()))?;
        finite.push(m.value()?.is_finite());
        acc = Some(match acc {
            Some(prev) => g.add(&prev, &m)?,
            None => m,
        });
    }
    let loss = g.affine(&acc.expect("at least one head"), 1.0 / model.heads.len() as f64, 0.0)?;
    Ok((loss, finite))
}

/// The pooled learning loss of a raw-unit trajectory given pre-generated
/// pseudo-outcomes (one [`PseudoOutcomes`] per conditioning step, in
/// order). Targets enter as constants; gradients flow only through the
/// factual encodings and heads.
pub fn learning_loss(
    g: &Graph,
    binder: &mut Binder,
    model: &IgcModel,
    traj: &Trajectory,
    pseudo: &[PseudoOutcomes],
    train: bool,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    if model.objective != Objective::Igc {
        return Err(Error::contract("learning_loss", "pseudo-outcome loss applies to IGC models"));
    }
    let tau = model.config.tau;
    let std_traj = model.standardizer.apply(traj);
    let steps = loss_steps(std_traj.len(), tau);
    let targets = targets_from_pseudo(model, steps, pseudo)?;
    let (loss, _) = objective_loss(g, binder, model, &std_traj, &targets, train, rng)?;
    Ok(loss)
}

/// Reassembles per-head target blocks from per-step pseudo-outcomes,
/// validating completeness.
pub(crate) fn targets_from_pseudo(
    model: &IgcModel,
    steps: std::ops::Range<usize>,
    pseudo: &[PseudoOutcomes],
) -> Result<Vec<Array2<f64>>> {
    let tau = model.config.tau;
    let d_y = model.dims.d_y;
    let n_t = steps.len();
    if pseudo.len() != n_t {
        return Err(Error::contract(
            "learning_loss",
            format!("missing pseudo entry: {} steps provided, {n_t} required", pseudo.len()),
        ));
    }
    let mut targets = vec![Array2::zeros((n_t, d_y)); tau];
    for (i, (t, p)) in steps.zip(pseudo).enumerate() {
        if p.t != t {
            return Err(Error::contract(
                "learning_loss",
                format!("pseudo entry {i} is for step {}, expected {t}", p.t),
            ));
        }
        if p.entries.len() != tau || p.entries.iter().any(|e| e.len() != d_y) {
            return Err(Error::contract(
                "learning_loss",
                format!("missing pseudo entry: step {t} lacks a complete horizon chain"),
            ));
        }
        for (target, entry) in targets.iter_mut().zip(&p.entries) {
            for (j, v) in entry.iter().enumerate() {
                target[[i, j]] = *v;
            }
        }
    }
    Ok(targets)
}
