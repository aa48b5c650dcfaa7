//! Benchmark sweeps: train every requested estimator on every generator
//! cell, horizon, and seed, score it against ground-truth counterfactuals,
//! and render the results as a byte-deterministic CSV plus a JSON summary.
//!
//! A [`BenchmarkSpec`] names the grid up front: sweep cells (a generator
//! with fixed knobs plus an optional training-target corruption level),
//! estimators, horizons, seeds, and a shared query policy (one fixed
//! interventional sequence, applied at the same conditioning step of every
//! held-out trajectory). Each `(cell, horizon, seed)` scenario generates
//! its own training split, held-out query trajectories, and oracle values,
//! all from streams derived from the run seed, so any single
//! [`ResultRow`] can be reproduced from the specification and its seed
//! alone. Scenarios run in parallel; aggregation is a single ordered pass.
//!
//! Failures inside one scenario (a horizon too long for the generator's
//! trajectories, say) are recorded as [`CellFailure`] entries and the rest
//! of the sweep continues.
//!
//! Wall-clock runtimes are measured per estimator run but reported only in
//! the JSON summary; the CSV carries the deterministic columns so that
//! re-running the same specification reproduces it byte for byte.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::StreamRng;
use crate::backbone::BackboneConfig;
use crate::baselines::{
    fit_propensity, ipw_regress, mc_gcomp, train_history_regressor, FitSchedule, IpwConfig,
    McGcompConfig, PropensityConfig, WeightStabilization,
};
use crate::datagen::discrete::confounded_fixture;
use crate::datagen::semisynth::{SeededSemiSynth, SemiSynthDgp, SemiSynthParams};
use crate::datagen::tumor::{TumorDgp, TumorParams};
use crate::datagen::{Dataset, Dgp, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{coefficient_of_variation, rmse, Normalization};
use crate::model::{train, train_biased_ablation, ModelConfig, TrainConfig};

/// Estimators the sweep harness can train and score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Iterated-regression G-computation (the estimator under study).
    Igc,
    /// Ablation that regresses factual future outcomes directly and so
    /// converges to the confounded conditional expectation.
    BiasedAblation,
    /// History-adjusted direct outcome regression.
    HistoryRegressor,
    /// Inverse-propensity-weighted pseudo-outcome regression (cross-fit on
    /// a nuisance/outcome split of the training data).
    Ipw,
    /// Monte-Carlo G-computation with a learned transition density.
    McGcomp,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Igc,
        EstimatorKind::BiasedAblation,
        EstimatorKind::HistoryRegressor,
        EstimatorKind::Ipw,
        EstimatorKind::McGcomp,
    ];

    /// Identifier used in result tables (matches the serialized form).
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Igc => "igc",
            EstimatorKind::BiasedAblation => "biased-ablation",
            EstimatorKind::HistoryRegressor => "history-regressor",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::McGcomp => "mc-gcomp",
        }
    }
}

/// The generator behind one sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellDgp {
    Tumor(TumorParams),
    SemiSynth(SemiSynthParams),
    /// The two-level confounded tabular process with enumeration oracles.
    DiscreteFixture,
}

impl CellDgp {
    /// Instantiates the generator. `dataset_seed` binds the semi-synthetic
    /// process to its latent draw (the others ignore it).
    pub fn build(&self, dataset_seed: u64) -> Box<dyn Dgp> {
        match self {
            CellDgp::Tumor(p) => Box::new(TumorDgp::new(p.clone())),
            CellDgp::SemiSynth(p) => {
                Box::new(SeededSemiSynth { dgp: SemiSynthDgp::new(p.clone()), dataset_seed })
            }
            CellDgp::DiscreteFixture => Box::new(confounded_fixture()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CellDgp::Tumor(_) => "tumor",
            CellDgp::SemiSynth(_) => "semisynth",
            CellDgp::DiscreteFixture => "discrete-scm",
        }
    }

    /// `(confounding, overlap, unobserved-confounder)` knobs for result
    /// tables. The semi-synthetic process reports its mean per-treatment
    /// confounding weight; the discrete fixture has fixed knobs and
    /// reports zeros.
    pub fn knobs(&self) -> (f64, f64, f64) {
        match self {
            CellDgp::Tumor(p) => (p.gamma, p.rho_overlap, p.omega),
            CellDgp::SemiSynth(p) => {
                let g = if p.gamma_y.is_empty() {
                    0.0
                } else {
                    p.gamma_y.iter().sum::<f64>() / p.gamma_y.len() as f64
                };
                (g, 0.0, 0.0)
            }
            CellDgp::DiscreteFixture => (0.0, 0.0, 0.0),
        }
    }

    /// Scale for the normalized RMSE column: the maximum outcome for the
    /// tumor process (its volume cap), one elsewhere.
    pub fn norm_scale(&self) -> f64 {
        match self {
            CellDgp::Tumor(p) => p.volume_cap(),
            CellDgp::SemiSynth(_) | CellDgp::DiscreteFixture => 1.0,
        }
    }

    fn d_a(&self) -> usize {
        match self {
            CellDgp::Tumor(_) => 2,
            CellDgp::SemiSynth(p) => p.windows.len(),
            CellDgp::DiscreteFixture => 1,
        }
    }

    fn min_len(&self) -> usize {
        match self {
            CellDgp::Tumor(p) => p.t_min,
            CellDgp::SemiSynth(p) => p.t_min,
            CellDgp::DiscreteFixture => confounded_fixture().t_len,
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub dgp: CellDgp,
    /// Constant shift added to the iterated-regression pseudo-outcomes
    /// during training, in standardized outcome units (zero disables; only
    /// the iterated-regression estimator generates such targets, so the
    /// other estimators ignore it).
    #[serde(default)]
    pub corruption_bias: f64,
    /// Optional suffix distinguishing cells whose generator knobs do not
    /// differ in any result-table column.
    #[serde(default)]
    pub tag: Option<String>,
}

impl SweepCell {
    /// Cell identifier for the `dgp` result column.
    pub fn label(&self) -> String {
        let mut s = self.dgp.name().to_string();
        if self.corruption_bias != 0.0 {
            s.push_str(&format!("+corr{}", self.corruption_bias));
        }
        if let Some(tag) = &self.tag {
            s.push_str(&format!("+{tag}"));
        }
        s
    }
}

/// Architecture and optimization knobs shared by every estimator in a
/// sweep (kept deliberately small; per-estimator tuning would make the
/// comparison about budgets rather than objectives).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub d_h: usize,
    pub d_z: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Monte-Carlo rollout draws per query (Monte-Carlo G-computation only).
    pub mc_draws: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            d_h: 16,
            d_z: 8,
            dropout: 0.1,
            head_hidden: 16,
            epochs: 15,
            batch_size: 32,
            lr: 5e-3,
            mc_draws: 50,
        }
    }
}

impl FitSettings {
    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            d_h: self.d_h,
            d_z: self.d_z,
            dropout: self.dropout,
            ..BackboneConfig::default()
        }
    }

    fn schedule(&self, seed: u64) -> FitSchedule {
        FitSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            clip_norm: Some(1.0),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_draws == 0 {
            return Err(Error::Config("epochs, batch_size, and mc_draws must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Full description of a sweep: every result row is a pure function of
/// this specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub cells: Vec<SweepCell>,
    pub estimators: Vec<EstimatorKind>,
    /// Prediction horizons; each gets its own rows.
    pub taus: Vec<usize>,
    /// Training trajectories per scenario.
    pub n_train: usize,
    /// Held-out trajectories queried per scenario (one query each).
    pub n_queries: usize,
    /// Conditioning step of every query.
    pub t_query: usize,
    /// Interventional treatment sequence; the first τ rows serve horizon τ.
    pub a_bar: Vec<Vec<f64>>,
    /// Run seeds. Training data, held-out data, oracle noise, and
    /// Monte-Carlo prediction draws all flow from disjoint streams derived
    /// from each seed.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub fit: FitSettings,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("sweep needs at least one cell".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("sweep needs at least one estimator".into()));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return Err(Error::Config(format!("duplicate estimator {}", e.label())));
            }
        }
        if self.taus.is_empty() || self.taus.contains(&0) {
            return Err(Error::Config("horizons must be a nonempty list of values >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("duplicate seed {s}")));
            }
        }
        if self.n_train < 2 {
            return Err(Error::Config("n_train must be >= 2 (nuisance splits halve it)".into()));
        }
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be >= 1".into()));
        }
        let tau_max = *self.taus.iter().max().expect("nonempty");
        if self.a_bar.len() < tau_max {
            return Err(Error::Config(format!(
                "treatment sequence has {} rows but the longest horizon needs {tau_max}",
                self.a_bar.len()
            )));
        }
        if self.a_bar.iter().flatten().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Config("interventional treatments must be 0/1".into()));
        }
        for cell in &self.cells {
            let d_a = cell.dgp.d_a();
            if self.a_bar.iter().any(|row| row.len() != d_a) {
                return Err(Error::Config(format!(
                    "treatment rows must have {d_a} entries for the {} process",
                    cell.dgp.name()
                )));
            }
            let min_len = cell.dgp.min_len();
            if self.t_query + tau_max + 1 > min_len {
                return Err(Error::Config(format!(
                    "query at step {} with horizon {tau_max} needs trajectories of length >= {}, but the {} process guarantees only {min_len}",
                    self.t_query,
                    self.t_query + tau_max + 1,
                    cell.dgp.name()
                )));
            }
            if let Some(tag) = &cell.tag {
                if tag.contains([',', '"', '\n']) {
                    return Err(Error::Config(format!("cell tag {tag:?} must stay CSV-safe")));
                }
            }
        }
        self.fit.validate()
    }

    fn a_bar_for(&self, tau: usize, d_a: usize) -> Result<Array2<f64>> {
        let flat: Vec<f64> = self.a_bar[..tau].concat();
        Array2::from_shape_vec((tau, d_a), flat)
            .map_err(|e| Error::shape("run_sweep", e.to_string()))
    }
}

/// One scored estimator run.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub estimator: EstimatorKind,
    /// Cell label (generator name plus corruption/tag suffixes).
    pub dgp: String,
    /// Confounding knob of the cell's generator.
    pub gamma: f64,
    /// Overlap knob.
    pub rho: f64,
    /// Unobserved-confounder knob.
    pub omega: f64,
    pub tau: usize,
    /// Training trajectories.
    pub n: usize,
    pub seed: u64,
    pub rmse: f64,
    /// RMSE after dividing errors by the cell's outcome scale.
    pub rmse_norm: f64,
    /// Coefficient of variation of `rmse` across this row's
    /// (cell × horizon × estimator) group; absent below two seeds or when
    /// the group mean is zero.
    pub cv_group: Option<f64>,
    /// Wall-clock training + prediction seconds (JSON summary only; the
    /// CSV skips it to stay byte-deterministic).
    pub runtime_s: f64,
    pub n_queries: usize,
}

/// A scenario or estimator run that errored; the sweep records it and
/// moves on.
#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub dgp: String,
    pub tau: usize,
    pub seed: u64,
    /// Absent when generation or the oracle failed before any estimator ran.
    pub estimator: Option<EstimatorKind>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// Everything shared by the estimator runs of one `(cell, τ, seed)`
/// scenario.
struct Scenario {
    train: Dataset,
    /// Held-out trajectory and its oracle CAPO, one query per trajectory.
    queries: Vec<(Trajectory, Vec<f64>)>,
    a_bar: Array2<f64>,
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    StreamRng::new(seed, label).below(u64::MAX)
}

fn prepare_scenario(spec: &BenchmarkSpec, cell: &SweepCell, tau: usize, seed: u64) -> Result<Scenario> {
    let a_bar = spec.a_bar_for(tau, cell.dgp.d_a())?;
    let train_seed = derive_seed(seed, "sweep-train-data");
    let eval_seed = derive_seed(seed, "sweep-eval-data");
    let train = cell.dgp.build(train_seed).generate(spec.n_train, train_seed, "train")?;
    let eval_gen = cell.dgp.build(eval_seed);
    let eval_ds = eval_gen.generate(spec.n_queries, eval_seed, "eval")?;
    let oracle_base = StreamRng::new(seed, "sweep-oracle");
    let mut queries = Vec::with_capacity(eval_ds.len());
    for (i, tr) in eval_ds.trajectories.iter().enumerate() {
        let oracle_seed = oracle_base.substream_idx("query", i as u64).below(u64::MAX);
        let oracle = eval_gen.capo_oracle(tr, spec.t_query, &a_bar, oracle_seed)?;
        queries.push((tr.clone(), oracle.value));
    }
    Ok(Scenario { train, queries, a_bar })
}

fn run_estimator(
    spec: &BenchmarkSpec,
    cell: &SweepCell,
    tau: usize,
    seed: u64,
    estimator: EstimatorKind,
    sc: &Scenario,
) -> Result<ResultRow> {
    let fit = &spec.fit;
    let start = Instant::now();
    let predictions: Vec<Vec<f64>> = match estimator {
        EstimatorKind::Igc | EstimatorKind::BiasedAblation | EstimatorKind::HistoryRegressor => {
            let model_cfg =
                ModelConfig { backbone: fit.backbone(), head_hidden: fit.head_hidden, tau };
            let train_cfg = TrainConfig {
                epochs: fit.epochs,
                batch_size: fit.batch_size,
                lr: fit.lr,
                corruption_bias: cell.corruption_bias,
                seed,
                ..TrainConfig::default()
            };
            let out = match estimator {
                EstimatorKind::Igc => train(&sc.train, &model_cfg, &train_cfg)?,
                EstimatorKind::BiasedAblation => {
                    train_biased_ablation(&sc.train, &model_cfg, &train_cfg)?
                }
                _ => train_history_regressor(&sc.train, &model_cfg, &train_cfg)?,
            };
            sc.queries
                .iter()
                .map(|(tr, _)| out.model.predict_capo(tr, spec.t_query, &sc.a_bar))
                .collect::<Result<_>>()?
        }
        EstimatorKind::Ipw => {
            let (nuisance, outcome) =
                sc.train.split_at(sc.train.len() / 2, "sweep-nuisance", "sweep-outcome")?;
            let prop_cfg = PropensityConfig {
                backbone: fit.backbone(),
                head_hidden: fit.head_hidden,
                schedule: fit.schedule(seed),
                ..PropensityConfig::default()
            };
            let propensity = fit_propensity(&nuisance, &prop_cfg)?;
            let ipw_cfg = IpwConfig {
                backbone: fit.backbone(),
                head_hidden: fit.head_hidden,
                tau,
                stabilized: WeightStabilization::Auto,
                schedule: fit.schedule(seed),
            };
            let out = ipw_regress(&outcome, &propensity.model, &sc.a_bar, &ipw_cfg)?;
            sc.queries
                .iter()
                .map(|(tr, _)| out.model.predict_capo(tr, spec.t_query))
                .collect::<Result<_>>()?
        }
        EstimatorKind::McGcomp => {
            let cfg = McGcompConfig {
                backbone: fit.backbone(),
                head_hidden: fit.head_hidden,
                tau,
                schedule: fit.schedule(seed),
            };
            let out = mc_gcomp(&sc.train, &cfg)?;
            let draw_seed = derive_seed(seed, "sweep-mc-eval");
            sc.queries
                .iter()
                .map(|(tr, _)| {
                    out.model.predict_capo(tr, spec.t_query, &sc.a_bar, fit.mc_draws, draw_seed)
                })
                .collect::<Result<_>>()?
        }
    };
    let runtime_s = start.elapsed().as_secs_f64().max(1e-9);
    let truths: Vec<Vec<f64>> = sc.queries.iter().map(|(_, o)| o.clone()).collect();
    let raw = rmse(&predictions, &truths, Normalization::Raw)?;
    let norm = rmse(&predictions, &truths, Normalization::Scaled(cell.dgp.norm_scale()))?;
    let (gamma, rho, omega) = cell.dgp.knobs();
    Ok(ResultRow {
        estimator,
        dgp: cell.label(),
        gamma,
        rho,
        omega,
        tau,
        n: spec.n_train,
        seed,
        rmse: raw,
        rmse_norm: norm,
        cv_group: None,
        runtime_s,
        n_queries: sc.queries.len(),
    })
}

fn run_scenario(
    spec: &BenchmarkSpec,
    cell: &SweepCell,
    tau: usize,
    seed: u64,
) -> (Vec<ResultRow>, Vec<CellFailure>) {
    let label = cell.label();
    let scenario = match prepare_scenario(spec, cell, tau, seed) {
        Ok(s) => s,
        Err(e) => {
            let failure =
                CellFailure { dgp: label, tau, seed, estimator: None, message: e.to_string() };
            return (Vec::new(), vec![failure]);
        }
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &estimator in &spec.estimators {
        match run_estimator(spec, cell, tau, seed, estimator, &scenario) {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(CellFailure {
                dgp: label.clone(),
                tau,
                seed,
                estimator: Some(estimator),
                message: e.to_string(),
            }),
        }
    }
    (rows, failures)
}

/// Runs the whole grid. Scenarios execute in parallel; rows come back in
/// specification order (cells, then horizons, then seeds, then
/// estimators), so the rendered CSV is stable across re-runs.
pub fn run_sweep(spec: &BenchmarkSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let mut scenarios = Vec::new();
    for cell in &spec.cells {
        for &tau in &spec.taus {
            for &seed in &spec.seeds {
                scenarios.push((cell, tau, seed));
            }
        }
    }
    let results: Vec<(Vec<ResultRow>, Vec<CellFailure>)> = scenarios
        .par_iter()
        .map(|&(cell, tau, seed)| run_scenario(spec, cell, tau, seed))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in results {
        rows.extend(r);
        failures.extend(f);
    }
    attach_cv_groups(&mut rows);
    Ok(SweepOutcome { rows, failures })
}

/// Rows that share a (cell, knobs, horizon, estimator) group differ only
/// by seed; each gets the group's coefficient of variation of RMSE.
type GroupKey = (String, u64, u64, u64, usize, EstimatorKind);

fn group_key(row: &ResultRow) -> GroupKey {
    (row.dgp.clone(), row.gamma.to_bits(), row.rho.to_bits(), row.omega.to_bits(), row.tau, row.estimator)
}

fn attach_cv_groups(rows: &mut [ResultRow]) {
    let mut groups: HashMap<GroupKey, Vec<f64>> = HashMap::new();
    for row in rows.iter() {
        groups.entry(group_key(row)).or_default().push(row.rmse);
    }
    for row in rows.iter_mut() {
        let values = &groups[&group_key(row)];
        row.cv_group = if values.len() >= 2 {
            coefficient_of_variation(values).ok().flatten()
        } else {
            None
        };
    }
}

/// Renders rows as CSV. Every column is a deterministic function of the
/// specification, so identical sweeps produce identical bytes.
pub fn sweep_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("estimator,dgp,gamma,rho,omega,tau,n,seed,rmse,rmse_norm,cv_group\n");
    for r in rows {
        let cv = r.cv_group.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.estimator.label(),
            r.dgp,
            r.gamma,
            r.rho,
            r.omega,
            r.tau,
            r.n,
            r.seed,
            r.rmse,
            r.rmse_norm,
            cv
        ));
    }
    out
}

/// Per-group aggregate over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub estimator: EstimatorKind,
    pub dgp: String,
    pub gamma: f64,
    pub rho: f64,
    pub omega: f64,
    pub tau: usize,
    pub n_seeds: usize,
    pub mean_rmse: f64,
    /// Sample standard deviation over seeds; absent for a single seed.
    pub std_rmse: Option<f64>,
    pub cv: Option<f64>,
    pub mean_runtime_s: f64,
}

/// How much the iterated-regression estimator improves on the best
/// baseline in its group, as a percentage of the baseline's RMSE
/// (positive means lower error than every baseline).
#[derive(Debug, Clone, Serialize)]
pub struct ImprovementSummary {
    pub dgp: String,
    pub gamma: f64,
    pub rho: f64,
    pub omega: f64,
    pub tau: usize,
    pub ours_mean_rmse: f64,
    pub best_baseline: EstimatorKind,
    pub best_baseline_mean_rmse: f64,
    pub relative_improvement_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub groups: Vec<GroupSummary>,
    pub improvements: Vec<ImprovementSummary>,
    pub failures: Vec<CellFailure>,
}

/// Aggregates rows into per-group means and baseline comparisons. Groups
/// appear in first-row order.
pub fn summarize(outcome: &SweepOutcome) -> SweepSummary {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut by_group: HashMap<GroupKey, Vec<&ResultRow>> = HashMap::new();
    for row in &outcome.rows {
        let key = group_key(row);
        if !by_group.contains_key(&key) {
            order.push(key.clone());
        }
        by_group.entry(key).or_default().push(row);
    }

    let mut groups = Vec::with_capacity(order.len());
    for key in &order {
        let rows = &by_group[key];
        let n_seeds = rows.len();
        let mean_rmse = rows.iter().map(|r| r.rmse).sum::<f64>() / n_seeds as f64;
        let std_rmse = (n_seeds >= 2).then(|| {
            let var = rows.iter().map(|r| (r.rmse - mean_rmse).powi(2)).sum::<f64>()
                / (n_seeds - 1) as f64;
            var.sqrt()
        });
        let mean_runtime_s = rows.iter().map(|r| r.runtime_s).sum::<f64>() / n_seeds as f64;
        let first = rows[0];
        groups.push(GroupSummary {
            estimator: first.estimator,
            dgp: first.dgp.clone(),
            gamma: first.gamma,
            rho: first.rho,
            omega: first.omega,
            tau: first.tau,
            n_seeds,
            mean_rmse,
            std_rmse,
            cv: first.cv_group,
            mean_runtime_s,
        });
    }

    // Baseline comparison per (cell, horizon): the iterated-regression
    // estimator against the best mean RMSE among the other estimators.
    let mut improvements = Vec::new();
    let mut seen: Vec<(String, u64, u64, u64, usize)> = Vec::new();
    for g in &groups {
        let scenario_key =
            (g.dgp.clone(), g.gamma.to_bits(), g.rho.to_bits(), g.omega.to_bits(), g.tau);
        if seen.contains(&scenario_key) {
            continue;
        }
        seen.push(scenario_key);
        let peers: Vec<&GroupSummary> = groups
            .iter()
            .filter(|o| {
                o.dgp == g.dgp
                    && o.gamma == g.gamma
                    && o.rho == g.rho
                    && o.omega == g.omega
                    && o.tau == g.tau
            })
            .collect();
        let Some(ours) = peers.iter().find(|o| o.estimator == EstimatorKind::Igc) else {
            continue;
        };
        let Some(best) = peers
            .iter()
            .filter(|o| o.estimator != EstimatorKind::Igc)
            .min_by(|a, b| a.mean_rmse.total_cmp(&b.mean_rmse))
        else {
            continue;
        };
        if best.mean_rmse == 0.0 {
            continue;
        }
        improvements.push(ImprovementSummary {
            dgp: g.dgp.clone(),
            gamma: g.gamma,
            rho: g.rho,
            omega: g.omega,
            tau: g.tau,
            ours_mean_rmse: ours.mean_rmse,
            best_baseline: best.estimator,
            best_baseline_mean_rmse: best.mean_rmse,
            relative_improvement_pct: (best.mean_rmse - ours.mean_rmse) / best.mean_rmse * 100.0,
        });
    }

    SweepSummary { groups, improvements, failures: outcome.failures.clone() }
}

/// Pretty-printed JSON of [`summarize`], with per-group runtimes.
pub fn sweep_summary_json(outcome: &SweepOutcome) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&summarize(outcome))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_discrete_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            cells: vec![SweepCell {
                dgp: CellDgp::DiscreteFixture,
                corruption_bias: 0.0,
                tag: None,
            }],
            estimators: vec![EstimatorKind::HistoryRegressor],
            taus: vec![2],
            n_train: 6,
            n_queries: 2,
            t_query: 2,
            a_bar: vec![vec![1.0], vec![1.0]],
            seeds: vec![0],
            fit: FitSettings {
                d_h: 6,
                d_z: 4,
                dropout: 0.0,
                head_hidden: 8,
                epochs: 1,
                batch_size: 8,
                lr: 5e-3,
                mc_draws: 4,
            },
        }
    }

    fn bare_row(estimator: EstimatorKind, dgp: &str, tau: usize, seed: u64, rmse: f64) -> ResultRow {
        ResultRow {
            estimator,
            dgp: dgp.into(),
            gamma: 0.0,
            rho: 0.0,
            omega: 0.0,
            tau,
            n: 8,
            seed,
            rmse,
            rmse_norm: rmse,
            cv_group: None,
            runtime_s: 0.5,
            n_queries: 4,
        }
    }

    #[test]
    fn specs_that_cannot_run_are_rejected_up_front() {
        let ok = tiny_discrete_spec();
        assert!(ok.validate().is_ok());

        let mut spec = tiny_discrete_spec();
        spec.estimators.clear();
        assert!(spec.validate().is_err());

        let mut spec = tiny_discrete_spec();
        spec.estimators = vec![EstimatorKind::Igc, EstimatorKind::Igc];
        assert!(spec.validate().is_err());

        let mut spec = tiny_discrete_spec();
        spec.a_bar = vec![vec![1.0], vec![0.5]];
        assert!(spec.validate().is_err());

        let mut spec = tiny_discrete_spec();
        spec.a_bar = vec![vec![1.0]];
        assert!(spec.validate().is_err(), "too few treatment rows for tau 2");

        let mut spec = tiny_discrete_spec();
        spec.a_bar = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(spec.validate().is_err(), "treatment width must match the process");

        let mut spec = tiny_discrete_spec();
        spec.t_query = 6;
        assert!(spec.validate().is_err(), "query horizon must fit inside every trajectory");

        let mut spec = tiny_discrete_spec();
        spec.seeds = vec![3, 3];
        assert!(spec.validate().is_err());

        let mut spec = tiny_discrete_spec();
        spec.cells[0].tag = Some("a,b".into());
        assert!(spec.validate().is_err());

        let mut spec = tiny_discrete_spec();
        spec.fit.lr = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn one_cell_one_estimator_one_seed_yields_exactly_one_row() {
        let outcome = run_sweep(&tiny_discrete_spec()).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.rows.len(), 1);
        let row = &outcome.rows[0];
        assert_eq!(row.estimator, EstimatorKind::HistoryRegressor);
        assert_eq!(row.dgp, "discrete-scm");
        assert_eq!((row.tau, row.n, row.seed, row.n_queries), (2, 6, 0, 2));
        assert!(row.rmse.is_finite() && row.rmse >= 0.0);
        assert_eq!(row.rmse_norm, row.rmse, "unit scale leaves rmse unchanged");
        assert!(row.runtime_s > 0.0);
        assert_eq!(row.cv_group, None, "a single seed has no spread");
    }

    #[test]
    fn rerunning_the_same_spec_reproduces_the_csv_bytes() {
        let spec = tiny_discrete_spec();
        let a = sweep_csv(&run_sweep(&spec).unwrap().rows);
        let b = sweep_csv(&run_sweep(&spec).unwrap().rows);
        assert_eq!(a, b);
        assert!(a.starts_with("estimator,dgp,gamma,rho,omega,tau,n,seed,rmse,rmse_norm,cv_group\n"));
        assert_eq!(a.lines().count(), 2);
    }

    #[test]
    fn group_spread_lands_on_every_member_row() {
        let mut rows = vec![
            bare_row(EstimatorKind::Igc, "discrete-scm", 2, 0, 3.0),
            bare_row(EstimatorKind::Igc, "discrete-scm", 2, 1, 5.0),
            bare_row(EstimatorKind::Ipw, "discrete-scm", 2, 0, 4.0),
        ];
        attach_cv_groups(&mut rows);
        let expected = 2.0_f64.sqrt() / 4.0;
        assert!((rows[0].cv_group.unwrap() - expected).abs() < 1e-15);
        assert_eq!(rows[0].cv_group, rows[1].cv_group);
        assert_eq!(rows[2].cv_group, None, "singleton groups have no spread");
    }

    #[test]
    fn improvements_compare_against_the_best_baseline() {
        let rows = vec![
            bare_row(EstimatorKind::Igc, "tumor", 2, 0, 0.8),
            bare_row(EstimatorKind::Igc, "tumor", 2, 1, 0.8),
            bare_row(EstimatorKind::HistoryRegressor, "tumor", 2, 0, 1.0),
            bare_row(EstimatorKind::HistoryRegressor, "tumor", 2, 1, 1.0),
            bare_row(EstimatorKind::Ipw, "tumor", 2, 0, 1.2),
            bare_row(EstimatorKind::Ipw, "tumor", 2, 1, 1.2),
            // A second scenario without the iterated-regression estimator
            // contributes no comparison.
            bare_row(EstimatorKind::Ipw, "tumor", 3, 0, 1.0),
        ];
        let summary = summarize(&SweepOutcome { rows, failures: Vec::new() });
        assert_eq!(summary.improvements.len(), 1);
        let imp = &summary.improvements[0];
        assert_eq!(imp.best_baseline, EstimatorKind::HistoryRegressor);
        assert!((imp.best_baseline_mean_rmse - 1.0).abs() < 1e-15);
        assert!((imp.relative_improvement_pct - 20.0).abs() < 1e-12);
        assert_eq!(summary.groups.len(), 4);
        assert_eq!(summary.groups[0].n_seeds, 2);
        assert_eq!(summary.groups[0].std_rmse, Some(0.0));
    }

    #[test]
    fn cell_labels_carry_corruption_and_tag_suffixes() {
        let cell = SweepCell {
            dgp: CellDgp::Tumor(TumorParams::default()),
            corruption_bias: 0.5,
            tag: Some("wide".into()),
        };
        assert_eq!(cell.label(), "tumor+corr0.5+wide");
        let plain =
            SweepCell { dgp: CellDgp::DiscreteFixture, corruption_bias: 0.0, tag: None };
        assert_eq!(plain.label(), "discrete-scm");
    }

    #[test]
    fn estimator_labels_match_their_serialized_names() {
        for e in EstimatorKind::ALL {
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.label()));
        }
    }
}
