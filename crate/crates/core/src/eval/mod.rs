//! Evaluation: error metrics, an exact weighting-versus-regression
//! variance comparison, and a deterministic benchmark sweep harness.
//!
//! The metrics here score CAPO predictions against the ground-truth
//! counterfactuals that the synthetic generators expose. [`rmse`] pools
//! squared errors over queries and outcome dimensions, optionally after
//! dividing every error by a fixed outcome scale so that results are
//! comparable across processes with different outcome ranges.
//! [`coefficient_of_variation`] summarizes run-to-run spread of a metric
//! across seeds.
//!
//! [`variance::variance_comparison`] computes, in closed form over a
//! discrete one-step population, the variance of the inverse-propensity
//! pseudo-outcome against the variance of the regression (G-computation)
//! target, together with seeded empirical estimates of both — the
//! weighting penalty is exact, not simulated.
//!
//! [`sweep::run_sweep`] drives any combination of generators, estimators,
//! horizons, and seeds to a flat result table; every row is a pure
//! function of the benchmark specification, and the CSV rendering is
//! byte-identical across re-runs.

pub mod sweep;
pub mod variance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sweep::{
    run_sweep, summarize, sweep_csv, sweep_summary_json, BenchmarkSpec, CellDgp, CellFailure,
    EstimatorKind, FitSettings, GroupSummary, ImprovementSummary, ResultRow, SweepCell,
    SweepOutcome, SweepSummary,
};
pub use variance::{variance_comparison, StaticTabularDgp, VarianceComparison};

/// How [`rmse`] scales errors before squaring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Errors in raw outcome units.
    Raw,
    /// Every error is divided by the given positive scale (e.g. the maximum
    /// tumor volume), making results dimensionless and comparable across
    /// processes.
    Scaled(f64),
}

/// Root-mean-square error between predictions and ground-truth values,
/// pooled over queries and outcome dimensions.
///
/// Both slices hold one vector per query; paired vectors must have equal
/// length. Adding the same constant to a prediction and its ground truth
/// leaves the result unchanged.
pub fn rmse(predictions: &[Vec<f64>], truths: &[Vec<f64>], normalization: Normalization) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::contract(
            "rmse",
            format!("{} predictions against {} ground-truth values", predictions.len(), truths.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::contract("rmse", "no queries to score"));
    }
    let scale = match normalization {
        Normalization::Raw => 1.0,
        Normalization::Scaled(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::contract("rmse", format!("normalization scale {s} must be positive")));
            }
            s
        }
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (p, o)) in predictions.iter().zip(truths).enumerate() {
        if p.len() != o.len() {
            return Err(Error::contract(
                "rmse",
                format!("query {i}: prediction has {} dimensions, ground truth {}", p.len(), o.len()),
            ));
        }
        for (&pv, &ov) in p.iter().zip(o) {
            let e = (pv - ov) / scale;
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("rmse", "every query is zero-dimensional"));
    }
    let value = (sum / count as f64).sqrt();
    if !value.is_finite() {
        return Err(Error::numeric("rmse", "non-finite error"));
    }
    Ok(value)
}

/// Sample standard deviation divided by the mean.
///
/// Needs at least two values (the standard deviation uses the n−1
/// denominator). A zero mean makes the ratio undefined; that case is
/// reported as `None` rather than an error so result tables can show an
/// empty cell.
pub fn coefficient_of_variation(values: &[f64]) -> Result<Option<f64>> {
    if values.len() < 2 {
        return Err(Error::contract(
            "coefficient_of_variation",
            format!("needs at least 2 values, got {}", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("coefficient_of_variation", "non-finite value"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(Some(var.sqrt() / mean))
}
