//! Exact variance comparison between inverse-propensity weighting and
//! regression on the treated-arm mean.
//!
//! Over a one-step population with a discrete covariate `X`, treated-arm
//! propensity `π(X)`, and treated-arm outcome moments `E[Y | X, A=1]`,
//! `Var[Y | X, A=1]`, two unbiased single-sample pseudo-outcomes for the
//! mean potential outcome under treatment are
//!
//! * the weighting target `W·Y` with `W = A / π(X)`, and
//! * the regression target `m₁(X) = E[Y | X, A=1]` (what an outcome
//!   regression converges to).
//!
//! Both have the same mean, but the weighting target pays a variance
//! penalty of `E[m₁(X)² (1/π(X) − 1)] + E[Var[Y | X, A=1] / π(X)]`,
//! which is strictly positive whenever treatment assignment is random or
//! outcomes are noisy. [`variance_comparison`] evaluates both variances
//! and the penalty in closed form by summing over covariate levels, and
//! pairs them with seeded empirical estimates from the same population so
//! the algebra can be checked against simulation.

use serde::{Deserialize, Serialize};

use crate::autodiff::StreamRng;
use crate::error::{Error, Result};

/// A one-step population over a discrete covariate: level probabilities,
/// treated-arm propensities, and treated-arm outcome moments. Control-arm
/// outcomes never enter the comparison (the weighting target is zero
/// there), so they are not part of the description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticTabularDgp {
    /// `P(X = i)`; must sum to one.
    pub x_probs: Vec<f64>,
    /// `π(X = i) = P(A = 1 | X = i)`; must stay strictly above zero so the
    /// treated arm is observable at every level (one is allowed — weighting
    /// then degenerates to the identity).
    pub propensity: Vec<f64>,
    /// `E[Y | X = i, A = 1]`.
    pub mean_y1: Vec<f64>,
    /// `Var[Y | X = i, A = 1]`; empirical draws treat the treated-arm
    /// outcome as Gaussian with these moments.
    pub var_y1: Vec<f64>,
}

impl StaticTabularDgp {
    pub fn validate(&self) -> Result<()> {
        let k = self.x_probs.len();
        if k == 0 {
            return Err(Error::contract("variance_comparison", "no covariate levels"));
        }
        if self.propensity.len() != k || self.mean_y1.len() != k || self.var_y1.len() != k {
            return Err(Error::shape(
                "variance_comparison",
                format!(
                    "level counts disagree: {k} probabilities, {} propensities, {} means, {} variances",
                    self.propensity.len(),
                    self.mean_y1.len(),
                    self.var_y1.len()
                ),
            ));
        }
        let total: f64 = self.x_probs.iter().sum();
        if self.x_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(
                "variance_comparison",
                format!("covariate probabilities must be nonnegative and sum to 1 (sum {total})"),
            ));
        }
        for (i, &p) in self.propensity.iter().enumerate() {
            if !(p.is_finite() && p > 0.0 && p <= 1.0) {
                return Err(Error::contract(
                    "variance_comparison",
                    format!("propensity {p} at level {i} leaves the treated arm unobservable (positivity)"),
                ));
            }
        }
        if self.mean_y1.iter().any(|m| !m.is_finite()) {
            return Err(Error::contract("variance_comparison", "non-finite treated-arm mean"));
        }
        if self.var_y1.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::contract("variance_comparison", "treated-arm variances must be nonnegative"));
        }
        Ok(())
    }
}

/// Closed-form and empirical variances of the two pseudo-outcomes.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceComparison {
    /// Exact `Var[W·Y]`.
    pub var_ipw: f64,
    /// Exact `Var[m₁(X)]`.
    pub var_gcomp: f64,
    /// Exact weighting penalty, computed from its level-wise decomposition
    /// (not by subtracting the two variances — the two routes agreeing is a
    /// check on the algebra, not an identity of the code).
    pub gap: f64,
    /// Sample variance of `n` seeded draws of `W·Y`.
    pub empirical_var_ipw: f64,
    /// Sample variance of `n` seeded draws of `m₁(X)`.
    pub empirical_var_gcomp: f64,
    /// Standard error of `empirical_var_ipw` (moment estimate).
    pub se_var_ipw: f64,
    /// Standard error of `empirical_var_gcomp` (moment estimate).
    pub se_var_gcomp: f64,
    /// Number of empirical draws.
    pub n: usize,
}

/// Evaluates `Var[W·Y]`, `Var[m₁(X)]`, and the weighting penalty exactly
/// by summing over covariate levels, alongside empirical estimates from
/// `n` seeded draws of `(X, A, Y)`.
pub fn variance_comparison(dgp: &StaticTabularDgp, n: usize, seed: u64) -> Result<VarianceComparison> {
    dgp.validate()?;
    if n < 2 {
        return Err(Error::contract(
            "variance_comparison",
            format!("needs at least 2 empirical draws, got {n}"),
        ));
    }

    // Closed form. With E[W·Y | X] = m₁(X) and
    // E[(W·Y)² | X] = (Var[Y|X,1] + m₁(X)²) / π(X), both pseudo-outcomes
    // share the mean E[m₁(X)] and differ only in second moments.
    let mut mean_cf = 0.0;
    let mut second_gcomp = 0.0;
    let mut second_ipw = 0.0;
    let mut gap = 0.0;
    for (((&p, &pi), &m), &v) in
        dgp.x_probs.iter().zip(&dgp.propensity).zip(&dgp.mean_y1).zip(&dgp.var_y1)
    {
        mean_cf += p * m;
        second_gcomp += p * m * m;
        second_ipw += p * (v + m * m) / pi;
        gap += p * (m * m * (1.0 / pi - 1.0) + v / pi);
    }
    let var_gcomp = second_gcomp - mean_cf * mean_cf;
    let var_ipw = second_ipw - mean_cf * mean_cf;

    // Empirical draws: X categorical, A Bernoulli(π(X)), treated-arm Y
    // Gaussian with the level's moments. The weighting pseudo-outcome is
    // zero on control draws; the regression pseudo-outcome is the known
    // treated-arm mean at the drawn level.
    let base = StreamRng::new(seed, "variance-comparison");
    let mut ipw_draws = Vec::with_capacity(n);
    let mut gcomp_draws = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.substream_idx("sample", i as u64);
        let mut u = rng.uniform();
        let mut level = dgp.x_probs.len() - 1;
        for (j, &p) in dgp.x_probs.iter().enumerate() {
            if u < p {
                level = j;
                break;
            }
            u -= p;
        }
        let treated = rng.uniform() < dgp.propensity[level];
        let pseudo = if treated {
            let y = dgp.mean_y1[level] + dgp.var_y1[level].sqrt() * rng.gauss();
            y / dgp.propensity[level]
        } else {
            0.0
        };
        ipw_draws.push(pseudo);
        gcomp_draws.push(dgp.mean_y1[level]);
    }
    let (empirical_var_ipw, se_var_ipw) = sample_variance_with_se(&ipw_draws);
    let (empirical_var_gcomp, se_var_gcomp) = sample_variance_with_se(&gcomp_draws);

    Ok(VarianceComparison {
        var_ipw,
        var_gcomp,
        gap,
        empirical_var_ipw,
        empirical_var_gcomp,
        se_var_ipw,
        se_var_gcomp,
        n,
    })
}

/// Sample variance (n−1 denominator) and the moment-based standard error
/// of that variance estimate, `sqrt((m₄ − s⁴(n−3)/(n−1)) / n)`.
fn sample_variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let s2 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var_of_var = (m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n;
    (s2, var_of_var.max(0.0).sqrt())
}
