//! Semi-synthetic data generating process.
//!
//! Outcomes decompose into an untreated part and windowed treatment
//! effects. The untreated part of outcome `j` is
//!
//! `Ytilde^j_t = alpha_s·S_c(t) + alpha_g·g(t) + alpha_f·f^j_Y(X_t)
//!              + static shift + eps_t`
//!
//! where `S_c` is one of three random cubic splines (a per-trajectory
//! mixture draw), `g` is a linear time trend, and `f^j_Y` is a random
//! Fourier feature (RFF) approximation of a Gaussian-process sample over
//! the covariates. Covariates follow independent per-dimension AR(1)
//! processes standing in for vital signs.
//!
//! Treatment `l` is assigned with probability
//! `p^l_t = sigma(gamma_Y^l · ybar^l_{t-1} + gamma_X^l · f^l_A(X_t) + b^l
//!          + static shift)`
//! where `ybar^l_{t-1}` averages the previous `l+1` treated outcomes — so
//! assignment chases the treated outcome process and confounds later
//! outcomes (strength `gamma_Y`).
//!
//! An application of treatment `l` at step `i` contributes to outcome `j`
//! at steps `i..i+w_l`: at offset `delta = t - i` the candidate
//! contribution is `p^l_i · beta[l][j] / (w_l − delta + 1)²` (a ramp-up:
//! full effect arrives at the end of the window), and when several
//! treatments are simultaneously active at a step the *minimum* (strongest,
//! effects are negative) candidate is applied.
//!
//! Counterfactual oracles force the queried treatments, redraw future
//! covariate/outcome noise (shared across treatment sequences), let any
//! treatments beyond the forced horizon follow the natural policy, and
//! average.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_query_bounds, sigmoid_scalar, Dataset, Dgp, OracleValue, Trajectory};
use crate::autodiff::StreamRng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSynthParams {
    /// Trajectory lengths are drawn uniformly from `t_min..=t_max`
    /// (equal values give fixed-length datasets).
    pub t_min: usize,
    pub t_max: usize,
    /// Covariate dimensions (AR(1) channels).
    pub d_x: usize,
    /// AR(1) coefficient and innovation std of the covariates.
    pub ar_coeff: f64,
    pub ar_noise: f64,
    /// Number of mixture splines and control points per spline.
    pub n_splines: usize,
    pub spline_knots: usize,
    /// Per-trajectory weights alpha_s/alpha_g/alpha_f are uniform in this range.
    pub alpha_range: (f64, f64),
    /// RFF feature count and kernel lengthscale.
    pub rff_features: usize,
    pub rff_lengthscale: f64,
    /// Outcome-noise std.
    pub sigma_eps: f64,
    /// Confounding strengths per treatment: weight of recent treated
    /// outcomes in the assignment logit.
    pub gamma_y: Vec<f64>,
    /// Covariate weight per treatment in the assignment logit.
    pub gamma_x: Vec<f64>,
    /// Assignment logit intercepts.
    pub bias: Vec<f64>,
    /// Effect windows w_l (steps).
    pub windows: Vec<usize>,
    /// Maximum effects beta[l][j] of treatment l on outcome j (negative:
    /// treatments suppress the outcome).
    pub effect: Vec<Vec<f64>>,
    /// Static-covariate shifts: per-outcome additive coefficients on the
    /// first static, and a shared assignment-logit coefficient.
    pub static_outcome_coef: Vec<f64>,
    pub static_propensity_coef: f64,
    /// Monte-Carlo draws for counterfactual oracles.
    pub oracle_draws: usize,
}

impl Default for SemiSynthParams {
    fn default() -> Self {
        SemiSynthParams {
            t_min: 24,
            t_max: 24,
            d_x: 5,
            ar_coeff: 0.8,
            ar_noise: 0.4,
            n_splines: 3,
            spline_knots: 6,
            alpha_range: (0.2, 0.6),
            rff_features: 10,
            rff_lengthscale: 2.0,
            sigma_eps: 0.1,
            gamma_y: vec![3.0, 3.0, 3.0],
            gamma_x: vec![1.5, 1.5, 1.5],
            bias: vec![-1.0, -1.2, -1.4],
            windows: vec![3, 4, 5],
            effect: vec![vec![-0.9, -0.5], vec![-0.7, -1.0], vec![-1.2, -0.6]],
            static_outcome_coef: vec![0.2, -0.1],
            static_propensity_coef: 0.3,
            oracle_draws: 1000,
        }
    }
}

impl SemiSynthParams {
    pub fn d_a(&self) -> usize {
        self.windows.len()
    }

    pub fn d_y(&self) -> usize {
        self.effect.first().map(Vec::len).unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let (da, dy) = (self.d_a(), self.d_y());
        if da == 0 || dy == 0 || self.d_x == 0 {
            return Err(Error::contract("semisynth", "d_x, d_y, d_a must all be positive"));
        }
        if self.gamma_y.len() != da
            || self.gamma_x.len() != da
            || self.bias.len() != da
            || self.effect.len() != da
            || self.effect.iter().any(|row| row.len() != dy)
            || self.static_outcome_coef.len() != dy
        {
            return Err(Error::contract(
                "semisynth",
                "per-treatment/per-outcome parameter vectors have inconsistent lengths",
            ));
        }
        if self.t_min < 2 || self.t_max < self.t_min || self.spline_knots < 2 || self.n_splines == 0 {
            return Err(Error::contract("semisynth", "degenerate size parameters"));
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) {
            return Err(Error::contract("semisynth", "AR(1) coefficient must satisfy |phi| < 1"));
        }
        Ok(())
    }
}

/// Random Fourier feature function `f(x) = sqrt(2/D) Σ w_d cos(ω_d·x + b_d)`.
#[derive(Debug, Clone)]
struct Rff {
    omegas: Array2<f64>, // [D, d_x]
    phases: Vec<f64>,
    weights: Vec<f64>,
}

impl Rff {
    fn draw(rng: &mut StreamRng, features: usize, d_x: usize, lengthscale: f64) -> Self {
        let omegas =
            Array2::from_shape_fn((features, d_x), |_| rng.gauss() / lengthscale);
        let phases = (0..features).map(|_| rng.uniform_range(0.0, std::f64::consts::TAU)).collect();
        let weights = (0..features).map(|_| rng.gauss()).collect();
        Rff { omegas, phases, weights }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let d = self.omegas.nrows();
        let mut s = 0.0;
        for f in 0..d {
            let dot: f64 = self.omegas.row(f).iter().zip(x).map(|(w, v)| w * v).sum();
            s += self.weights[f] * (dot + self.phases[f]).cos();
        }
        (2.0 / d as f64).sqrt() * s
    }
}

/// Functions drawn once per dataset seed.
struct DatasetLatents {
    splines: Vec<Vec<f64>>, // control points per mixture component
    rff_y: Vec<Rff>,        // per outcome dim
    rff_a: Vec<Rff>,        // per treatment
}

/// Per-trajectory mixture draws.
struct TrajLatents {
    alpha_s: Vec<f64>,
    alpha_g: Vec<f64>,
    alpha_f: Vec<f64>,
    spline_choice: Vec<usize>,
    statics: Vec<f64>,
}

/// Centripetal-free uniform Catmull–Rom spline through `pts` at `u ∈ [0,1]`.
fn catmull_rom(pts: &[f64], u: f64) -> f64 {
    let n_seg = pts.len() - 1;
    let s = u.clamp(0.0, 1.0) * n_seg as f64;
    let i = (s.floor() as usize).min(n_seg - 1);
    let t = s - i as f64;
    let p0 = pts[i.saturating_sub(1)];
    let p1 = pts[i];
    let p2 = pts[i + 1];
    let p3 = pts[(i + 2).min(pts.len() - 1)];
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

/// Simulated `(covariates, outcomes, treatments, propensities)` rows.
type SimulatedRows = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Debug, Clone, Default)]
pub struct SemiSynthDgp {
    pub params: SemiSynthParams,
}

impl SemiSynthDgp {
    pub fn new(params: SemiSynthParams) -> Self {
        SemiSynthDgp { params }
    }

    fn dataset_latents(&self, seed: u64) -> DatasetLatents {
        let p = &self.params;
        let mut rng = StreamRng::new(seed, "semisynth").substream("dataset-latents");
        let splines = (0..p.n_splines)
            .map(|_| (0..p.spline_knots).map(|_| rng.gauss()).collect())
            .collect();
        let rff_y = (0..p.d_y())
            .map(|_| Rff::draw(&mut rng, p.rff_features, p.d_x, p.rff_lengthscale))
            .collect();
        let rff_a = (0..p.d_a())
            .map(|_| Rff::draw(&mut rng, p.rff_features, p.d_x, p.rff_lengthscale))
            .collect();
        DatasetLatents { splines, rff_y, rff_a }
    }

    fn traj_root(&self, seed: u64, idx: u64) -> StreamRng {
        StreamRng::new(seed, "semisynth").substream_idx("traj", idx)
    }

    fn traj_latents(&self, root: &StreamRng) -> TrajLatents {
        let p = &self.params;
        let mut rng = root.substream("latent");
        let dy = p.d_y();
        let (lo, hi) = p.alpha_range;
        let alpha_s = (0..dy).map(|_| rng.uniform_range(lo, hi)).collect();
        let alpha_g = (0..dy).map(|_| rng.uniform_range(lo, hi)).collect();
        let alpha_f = (0..dy).map(|_| rng.uniform_range(lo, hi)).collect();
        let spline_choice = (0..dy).map(|_| rng.below(p.n_splines as u64) as usize).collect();
        let statics = vec![rng.gauss(), rng.bernoulli(0.5) as u8 as f64];
        TrajLatents { alpha_s, alpha_g, alpha_f, spline_choice, statics }
    }

    /// Untreated outcome component at step `t` given the covariate row.
    fn untreated(
        &self,
        ds: &DatasetLatents,
        tl: &TrajLatents,
        j: usize,
        t: usize,
        x_row: &[f64],
        eps: f64,
    ) -> f64 {
        let p = &self.params;
        let u = t as f64 / (p.t_max - 1) as f64;
        tl.alpha_s[j] * catmull_rom(&ds.splines[tl.spline_choice[j]], u)
            + tl.alpha_g[j] * u
            + tl.alpha_f[j] * ds.rff_y[j].eval(x_row)
            + p.static_outcome_coef[j] * tl.statics[0]
            + p.sigma_eps * eps
    }

    /// Assignment probabilities at a step, given the treated-outcome window
    /// means `ybar[l]` and the covariate row.
    fn propensities(&self, ds: &DatasetLatents, tl: &TrajLatents, ybar: &[f64], x_row: &[f64]) -> Vec<f64> {
        let p = &self.params;
        (0..p.d_a())
            .map(|l| {
                sigmoid_scalar(
                    p.gamma_y[l] * ybar[l]
                        + p.gamma_x[l] * ds.rff_a[l].eval(x_row)
                        + p.bias[l]
                        + p.static_propensity_coef * tl.statics[0],
                )
            })
            .collect()
    }

    /// Mean of the previous `l+1` treated outcomes (pooled over outcome
    /// dims), or 0 when no history exists yet.
    fn ybar(y: &[Vec<f64>], t: usize, l: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let lo = t.saturating_sub(l + 1);
        let rows = &y[lo..t];
        let total: f64 = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).sum();
        total / rows.len() as f64
    }

    /// Windowed treatment contribution to outcome `j` at step `s`: per past
    /// step the strongest (minimum) active candidate.
    fn effect_sum(
        &self,
        j: usize,
        s: usize,
        a_at: &dyn Fn(usize, usize) -> f64,
        p_at: &dyn Fn(usize, usize) -> f64,
    ) -> f64 {
        let p = &self.params;
        let max_w = *p.windows.iter().max().expect("validated non-empty");
        let mut total = 0.0;
        for i in s.saturating_sub(max_w)..=s {
            let delta = s - i;
            let mut best: Option<f64> = None;
            for l in 0..p.d_a() {
                if delta <= p.windows[l] && a_at(i, l) == 1.0 {
                    let w = p.windows[l] - delta + 1;
                    let cand = p_at(i, l) * p.effect[l][j] / (w * w) as f64;
                    best = Some(match best {
                        Some(b) => cand.min(b),
                        None => cand,
                    });
                }
            }
            total += best.unwrap_or(0.0);
        }
        total
    }

    /// Full forward simulation under a treatment plan. The plan receives
    /// `(step, propensities)` and returns the realized treatment row;
    /// the observational plan draws Bernoullis, tests force rows directly.
    fn run<F>(
        &self,
        ds: &DatasetLatents,
        tl: &TrajLatents,
        t_len: usize,
        x_noise: &mut StreamRng,
        eps_rng: &mut StreamRng,
        mut plan: F,
    ) -> SimulatedRows
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let p = &self.params;
        let (dy, da) = (p.d_y(), p.d_a());
        let stationary = p.ar_noise / (1.0 - p.ar_coeff * p.ar_coeff).sqrt();
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut asv: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut ps: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x_row: Vec<f64> = if t == 0 {
                (0..p.d_x).map(|_| stationary * x_noise.gauss()).collect()
            } else {
                xs[t - 1]
                    .iter()
                    .map(|prev| p.ar_coeff * prev + p.ar_noise * x_noise.gauss())
                    .collect()
            };
            let ybars: Vec<f64> = (0..da).map(|l| Self::ybar(&ys, t, l)).collect();
            let probs = self.propensities(ds, tl, &ybars, &x_row);
            let a_row = plan(t, &probs);
            debug_assert_eq!(a_row.len(), da);
            asv.push(a_row);
            ps.push(probs);
            let y_row: Vec<f64> = (0..dy)
                .map(|j| {
                    let base = self.untreated(ds, tl, j, t, &x_row, eps_rng.gauss());
                    base + self.effect_sum(
                        j,
                        t,
                        &|i, l| asv[i][l],
                        &|i, l| ps[i][l],
                    )
                })
                .collect();
            xs.push(x_row);
            ys.push(y_row);
        }
        (xs, ys, asv, ps)
    }

    fn simulate(&self, seed: u64, idx: u64) -> Result<Trajectory> {
        let p = &self.params;
        let ds = self.dataset_latents(seed);
        let root = self.traj_root(seed, idx);
        let tl = self.traj_latents(&root);
        let t_len = if p.t_min == p.t_max {
            p.t_min
        } else {
            let mut len_rng = root.substream("length");
            p.t_min + len_rng.below((p.t_max - p.t_min + 1) as u64) as usize
        };
        let mut x_noise = root.substream("x-noise");
        let mut eps = root.substream("eps");
        let mut assign = root.substream("assign");
        let (xs, ys, asv, ps) = self.run(&ds, &tl, t_len, &mut x_noise, &mut eps, |_, probs| {
            probs.iter().map(|&pr| assign.bernoulli(pr) as u8 as f64).collect()
        });
        let to_arr = |rows: &[Vec<f64>], cols: usize| {
            Array2::from_shape_vec((t_len, cols), rows.iter().flatten().cloned().collect())
                .expect("row lengths validated")
        };
        Trajectory::new(
            idx,
            to_arr(&ys, p.d_y()),
            to_arr(&xs, p.d_x),
            to_arr(&asv, p.d_a()),
            tl.statics.clone(),
            to_arr(&ps, p.d_a()),
            0.0,
        )
    }
}

impl Dgp for SemiSynthDgp {
    fn name(&self) -> String {
        "semisynth".into()
    }

    fn generate(&self, n: usize, seed: u64, split_label: &str) -> Result<Dataset> {
        self.params.validate()?;
        let trajectories: Vec<Trajectory> =
            (0..n).map(|i| self.simulate(seed, i as u64)).collect::<Result<_>>()?;
        Dataset::new(trajectories, split_label)
    }

    /// The trait-level oracle needs the dataset seed to regenerate the
    /// per-trajectory latent functions; bind one with [`SeededSemiSynth`]
    /// or call [`SemiSynthDgp::capo_oracle_with_seed`].
    fn capo_oracle(
        &self,
        _traj: &Trajectory,
        _t: usize,
        _a_seq: &Array2<f64>,
        _oracle_seed: u64,
    ) -> Result<OracleValue> {
        Err(Error::contract(
            "semisynth_oracle",
            "latent functions are keyed by the dataset seed; wrap the generator in SeededSemiSynth",
        ))
    }
}

impl SemiSynthDgp {
    /// Monte-Carlo counterfactual: hold the factual prefix (including its
    /// realized noise) fixed, force `a_seq` from step `t`, redraw future
    /// covariate/outcome noise keyed by `(oracle_seed, trajectory, t, draw)`
    /// — shared across different `a_seq` — and let any assignment beyond
    /// the forced horizon follow the natural policy.
    pub fn capo_oracle_with_seed(
        &self,
        dataset_seed: u64,
        traj: &Trajectory,
        t: usize,
        a_seq: &Array2<f64>,
        oracle_seed: u64,
    ) -> Result<OracleValue> {
        let p = &self.params;
        p.validate()?;
        let tau = a_seq.nrows();
        check_query_bounds("semisynth_oracle", traj, t, tau)?;
        if a_seq.ncols() != p.d_a() {
            return Err(Error::shape(
                "semisynth_oracle",
                format!("expected {} treatment dims, got {}", p.d_a(), a_seq.ncols()),
            ));
        }
        let ds = self.dataset_latents(dataset_seed);
        let tl = self.traj_latents(&self.traj_root(dataset_seed, traj.id));
        let (dy, da) = (p.d_y(), p.d_a());
        let base = StreamRng::new(oracle_seed, "semisynth-oracle")
            .substream_idx("traj", traj.id)
            .substream_idx("t", t as u64);
        let draws = p.oracle_draws.max(2);
        let mut sums = vec![0.0; dy];
        let mut sqs = vec![0.0; dy];
        for k in 0..draws {
            let mut noise = base.substream_idx("draw", k as u64);
            // Buffers seeded with the factual prefix (steps 0..=t).
            let mut xs: Vec<Vec<f64>> = (0..=t).map(|s| traj.x.row(s).to_vec()).collect();
            let mut ys: Vec<Vec<f64>> = (0..=t).map(|s| traj.y.row(s).to_vec()).collect();
            let mut asv: Vec<Vec<f64>> = (0..=t).map(|s| traj.a.row(s).to_vec()).collect();
            let mut ps: Vec<Vec<f64>> =
                (0..=t).map(|s| traj.true_propensities.row(s).to_vec()).collect();
            // The intervention replaces the factual treatment at t; the
            // factual outcome row at t stays part of the history.
            asv[t] = a_seq.row(0).to_vec();
            for s in t + 1..=t + tau {
                let x_row: Vec<f64> = xs[s - 1]
                    .iter()
                    .map(|prev| p.ar_coeff * prev + p.ar_noise * noise.gauss())
                    .collect();
                let ybars: Vec<f64> = (0..da).map(|l| Self::ybar(&ys, s, l)).collect();
                let probs = self.propensities(&ds, &tl, &ybars, &x_row);
                let a_row: Vec<f64> = if s - t < tau {
                    a_seq.row(s - t).to_vec()
                } else {
                    // Beyond the forced horizon the natural policy applies.
                    probs.iter().map(|&pr| noise.bernoulli(pr) as u8 as f64).collect()
                };
                asv.push(a_row);
                ps.push(probs);
                let y_row: Vec<f64> = (0..dy)
                    .map(|j| {
                        self.untreated(&ds, &tl, j, s, &x_row, noise.gauss())
                            + self.effect_sum(j, s, &|i, l| asv[i][l], &|i, l| ps[i][l])
                    })
                    .collect();
                xs.push(x_row);
                ys.push(y_row);
            }
            for (j, v) in ys[t + tau].iter().enumerate() {
                sums[j] += v;
                sqs[j] += v * v;
            }
        }
        let n = draws as f64;
        let value: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let se = sqs
            .iter()
            .zip(&value)
            .map(|(&q, &m)| ((q / n - m * m).max(0.0) / (n - 1.0)).sqrt())
            .collect();
        Ok(OracleValue { value, se, method: "mc-shared-noise".into() })
    }
}

/// A semi-synthetic generator bound to its dataset seed, so the [`Dgp`]
/// trait's oracle can regenerate per-trajectory latent functions.
#[derive(Debug, Clone)]
pub struct SeededSemiSynth {
    pub dgp: SemiSynthDgp,
    pub dataset_seed: u64,
}

impl Dgp for SeededSemiSynth {
    fn name(&self) -> String {
        self.dgp.name()
    }

    fn generate(&self, n: usize, _seed: u64, split_label: &str) -> Result<Dataset> {
        self.dgp.generate(n, self.dataset_seed, split_label)
    }

    fn capo_oracle(
        &self,
        traj: &Trajectory,
        t: usize,
        a_seq: &Array2<f64>,
        oracle_seed: u64,
    ) -> Result<OracleValue> {
        self.dgp.capo_oracle_with_seed(self.dataset_seed, traj, t, a_seq, oracle_seed)
    }
}
