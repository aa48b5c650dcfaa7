//! Synthetic data generating processes with ground-truth counterfactuals.
//!
//! Three generators are provided, each exposing the quantities an estimator
//! benchmark needs but real observational data never has:
//!
//! * [`tumor`] — a pharmacologically inspired tumor-volume model with
//!   chemotherapy/radiotherapy assignment that depends on recent tumor
//!   diameter (time-varying confounding with a tunable strength `gamma`,
//!   an overlap knob, and an optional unobserved confounder);
//! * [`semisynth`] — a spline + random-feature outcome model over
//!   autoregressive covariates with three windowed treatments whose
//!   assignment depends on past treated outcomes;
//! * [`discrete`] — a small tabular structural causal model on which the
//!   G-computation formula and the confounded conditional expectation can
//!   be enumerated exactly.
//!
//! Every trajectory is a pure function of `(params, dataset seed, index)`;
//! counterfactual oracles re-run the mechanism under forced treatments with
//! shared noise, reporting a Monte-Carlo standard error (zero for exact or
//! noiseless oracles).

pub mod discrete;
pub mod io;
pub mod semisynth;
pub mod tumor;

use ndarray::Array2;

use crate::error::{Error, Result};

/// One unit's observed time series.
///
/// All arrays share the same number of rows `T` (time steps). Treatments
/// are binary per dimension; `true_propensities[t]` records the assignment
/// probability that generated `a[t]`. `u` is the realized unobserved
/// confounder (zero when the generating process has none) — benchmarks may
/// read it, estimators must not.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: u64,
    /// Outcomes, `[T, d_y]`.
    pub y: Array2<f64>,
    /// Time-varying covariates, `[T, d_x]` (`d_x` may be 0).
    pub x: Array2<f64>,
    /// Binary treatments, `[T, d_a]`.
    pub a: Array2<f64>,
    /// Static covariates (age/sex analogs), broadcast by encoders.
    pub statics: Vec<f64>,
    /// Assignment probabilities behind `a`, `[T, d_a]`.
    pub true_propensities: Array2<f64>,
    /// Unobserved confounder realization.
    pub u: f64,
}

impl Trajectory {
    /// Validates internal consistency (matching lengths, binary treatments,
    /// probabilities in [0,1], finite values).
    pub fn new(
        id: u64,
        y: Array2<f64>,
        x: Array2<f64>,
        a: Array2<f64>,
        statics: Vec<f64>,
        true_propensities: Array2<f64>,
        u: f64,
    ) -> Result<Self> {
        let t = y.nrows();
        if t == 0 {
            return Err(Error::contract("trajectory", "empty trajectory"));
        }
        if x.nrows() != t || a.nrows() != t || true_propensities.nrows() != t {
            return Err(Error::shape(
                "trajectory",
                format!(
                    "stream lengths differ: y {t}, x {}, a {}, propensities {}",
                    x.nrows(),
                    a.nrows(),
                    true_propensities.nrows()
                ),
            ));
        }
        if true_propensities.ncols() != a.ncols() {
            return Err(Error::shape(
                "trajectory",
                format!("propensity dims {} != treatment dims {}", true_propensities.ncols(), a.ncols()),
            ));
        }
        if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::contract("trajectory", "treatments must be 0/1"));
        }
        if true_propensities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("trajectory", "propensities must lie in [0,1]"));
        }
        for (name, arr) in [("y", &y), ("x", &x)] {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("trajectory", format!("non-finite value in {name}")));
            }
        }
        Ok(Trajectory { id, y, x, a, statics, true_propensities, u })
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }
}

/// A collection of trajectories with homogeneous dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub d_y: usize,
    pub d_x: usize,
    pub d_a: usize,
    pub n_static: usize,
    /// Label used to enforce honest splitting between nuisance models
    /// (e.g. "train", "propensity"). Purely bookkeeping.
    pub split_label: String,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, split_label: &str) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::contract("dataset", "no trajectories"))?;
        let (d_y, d_x, d_a, n_static) =
            (first.y.ncols(), first.x.ncols(), first.a.ncols(), first.statics.len());
        for tr in &trajectories {
            if tr.y.ncols() != d_y
                || tr.x.ncols() != d_x
                || tr.a.ncols() != d_a
                || tr.statics.len() != n_static
            {
                return Err(Error::shape(
                    "dataset",
                    format!("trajectory {} has inconsistent dimensions", tr.id),
                ));
            }
        }
        Ok(Dataset { trajectories, d_y, d_x, d_a, n_static, split_label: split_label.to_string() })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Splits off the first `n` trajectories into one dataset and the rest
    /// into another (trajectories are i.i.d. by construction, so contiguous
    /// splits are unbiased and reproducible).
    pub fn split_at(&self, n: usize, label_a: &str, label_b: &str) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::contract(
                "dataset_split",
                format!("split point {n} outside 1..{}", self.len()),
            ));
        }
        let a = Dataset::new(self.trajectories[..n].to_vec(), label_a)?;
        let b = Dataset::new(self.trajectories[n..].to_vec(), label_b)?;
        Ok((a, b))
    }

    /// Pooled standard deviation of each outcome dimension (used to express
    /// corruption levels in units of the outcome scale).
    pub fn outcome_std(&self) -> Vec<f64> {
        let mut n = 0usize;
        let mut sums = vec![0.0; self.d_y];
        let mut sqs = vec![0.0; self.d_y];
        for tr in &self.trajectories {
            for row in tr.y.rows() {
                for (j, v) in row.iter().enumerate() {
                    sums[j] += v;
                    sqs[j] += v * v;
                }
            }
            n += tr.len();
        }
        sums.iter()
            .zip(&sqs)
            .map(|(&s, &q)| {
                let mean = s / n as f64;
                (q / n as f64 - mean * mean).max(0.0).sqrt()
            })
            .collect()
    }
}

/// Ground-truth conditional average potential outcome for one query.
#[derive(Debug, Clone)]
pub struct OracleValue {
    /// CAPO per outcome dimension.
    pub value: Vec<f64>,
    /// Monte-Carlo standard error per dimension (zeros for exact oracles).
    pub se: Vec<f64>,
    /// How the value was obtained ("enumeration", "mc-shared-noise", ...).
    pub method: String,
}

/// A CAPO evaluation query: from the history of `trajectory_id` up to and
/// including step `t`, force the treatment sequence `a_seq` (`[tau, d_a]`)
/// and ask for the expected outcome at `t + tau`. The ground-truth value is
/// attached on evaluation splits and absent otherwise.
#[derive(Debug, Clone)]
pub struct CapoQuery {
    pub trajectory_id: u64,
    pub t: usize,
    pub a_seq: Array2<f64>,
    pub oracle: Option<OracleValue>,
}

/// Common interface the benchmark harness uses to drive any generator.
pub trait Dgp: Sync {
    /// Short identifier for result tables.
    fn name(&self) -> String;

    /// Generates `n` trajectories. Trajectory `i` depends only on
    /// `(params, seed, i)`, never on `n` or on other trajectories.
    fn generate(&self, n: usize, seed: u64, split_label: &str) -> Result<Dataset>;

    /// Ground-truth CAPO for a query against a generated trajectory.
    /// `oracle_seed` keys the Monte-Carlo noise (shared across treatment
    /// sequences for the same `(trajectory, t)` so contrasts are low-noise).
    fn capo_oracle(
        &self,
        traj: &Trajectory,
        t: usize,
        a_seq: &Array2<f64>,
        oracle_seed: u64,
    ) -> Result<OracleValue>;
}

/// Validates a query horizon against a trajectory.
pub(crate) fn check_query_bounds(
    op: &'static str,
    traj: &Trajectory,
    t: usize,
    tau: usize,
) -> Result<()> {
    if tau == 0 {
        return Err(Error::contract(op, "horizon tau must be >= 1"));
    }
    if t + tau > traj.len() - 1 {
        return Err(Error::contract(
            op,
            format!("query (t={t}, tau={tau}) exceeds trajectory length {}", traj.len()),
        ));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn traj(a_vals: &[[f64; 1]; 3]) -> Result<Trajectory> {
        Trajectory::new(
            0,
            arr2(&[[1.0], [2.0], [3.0]]),
            Array2::zeros((3, 0)),
            arr2(a_vals),
            vec![],
            arr2(&[[0.5], [0.5], [0.5]]),
            0.0,
        )
    }

    #[test]
    fn rejects_non_binary_treatments() {
        assert!(traj(&[[0.0], [1.0], [0.5]]).is_err());
        assert!(traj(&[[0.0], [1.0], [1.0]]).is_ok());
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let bad = Trajectory::new(
            0,
            arr2(&[[1.0], [2.0]]),
            Array2::zeros((3, 0)),
            arr2(&[[0.0], [1.0]]),
            vec![],
            arr2(&[[0.5], [0.5]]),
            0.0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn outcome_std_matches_hand_computation() {
        let tr = traj(&[[0.0], [1.0], [0.0]]).unwrap();
        let ds = Dataset::new(vec![tr], "test").unwrap();
        // y = 1,2,3: mean 2, population variance 2/3.
        let sd = ds.outcome_std();
        assert!((sd[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
