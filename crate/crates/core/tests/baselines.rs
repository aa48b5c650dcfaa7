//! Cross-estimator checks on the synthetic generators: calibration of the
//! treatment-assignment model, overlap stress, the variance penalty of
//! inverse weighting, Monte-Carlo draw scaling, and horizon-one agreement
//! between all estimators.

use igc_core::backbone::BackboneConfig;
use igc_core::baselines::{
    fit_propensity, ipw_pseudo_outcomes, ipw_regress, mc_gcomp, train_history_regressor,
    FitSchedule, IpwConfig, McGcompConfig, PropensityConfig,
};
use igc_core::datagen::discrete::confounded_fixture;
use igc_core::datagen::tumor::{TumorDgp, TumorParams};
use igc_core::datagen::{Dgp, Trajectory};
use igc_core::model::{train, ModelConfig, TrainConfig};
use ndarray::{arr2, Array2};

fn small_backbone() -> BackboneConfig {
    BackboneConfig { d_h: 12, d_z: 6, dropout: 0.1, ..Default::default() }
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Coin-flip assignment (γ = 0 tumor process): the fitted per-step
/// probabilities must sit within ±0.02 of one half everywhere.
#[test]
fn coin_flip_propensities_sit_near_one_half() {
    let dgp = TumorDgp::default(); // gamma = 0 -> logit 0 -> pi = 1/2
    let data = dgp.generate(1000, 11, "nuisance").unwrap(); // 20k steps
    // Labels are pure noise, so the optimum is the constant 1/2. The bound
    // is on held-out data, so capacity must stay small relative to the
    // sample — a wide net memorizes label noise and drifts past it.
    let cfg = PropensityConfig {
        backbone: BackboneConfig { d_h: 8, d_z: 4, dropout: 0.0, ..Default::default() },
        head_hidden: 8,
        schedule: FitSchedule { epochs: 4, batch_size: 32, ..Default::default() },
        ..Default::default()
    };
    let fit = fit_propensity(&data, &cfg).unwrap();
    assert!(fit.degenerate_dims.is_empty());

    let held = dgp.generate(20, 99, "eval").unwrap();
    let mut worst: f64 = 0.0;
    for tr in &held.trajectories {
        let probs = fit.model.predict_probs(tr).unwrap();
        for p in probs.iter() {
            worst = worst.max((p - 0.5).abs());
        }
    }
    assert!(worst <= 0.02, "worst deviation from 1/2 was {worst}");
}

/// Scaling the assignment logits (thinner overlap) must push the fitted
/// probability histogram toward the clip bounds.
#[test]
fn thin_overlap_pushes_propensity_mass_toward_the_bounds() {
    let fit_on = |rho_overlap: f64| {
        let dgp = TumorDgp::new(TumorParams { gamma: 10.0, rho_overlap, ..Default::default() });
        let data = dgp.generate(96, 17, "nuisance").unwrap();
        let cfg = PropensityConfig {
            backbone: BackboneConfig { d_h: 16, d_z: 8, dropout: 0.0, ..Default::default() },
            head_hidden: 16,
            schedule: FitSchedule { epochs: 10, lr: 1e-2, ..Default::default() },
            ..Default::default()
        };
        let fit = fit_propensity(&data, &cfg).unwrap();
        let mut probs = Vec::new();
        for tr in &data.trajectories {
            probs.extend(fit.model.predict_probs(tr).unwrap());
        }
        probs
    };
    let tail = |probs: &[f64]| {
        probs.iter().filter(|p| **p < 0.1 || **p > 0.9).count() as f64 / probs.len() as f64
    };
    let spread = |probs: &[f64]| {
        probs.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / probs.len() as f64
    };

    let mild = fit_on(1.0);
    let harsh = fit_on(5.0);
    assert!(
        tail(&harsh) > tail(&mild),
        "tail mass did not grow: {} vs {}",
        tail(&harsh),
        tail(&mild)
    );
    assert!(
        spread(&harsh) > spread(&mild),
        "spread did not grow: {} vs {}",
        spread(&harsh),
        spread(&mild)
    );
}

/// The variance penalty of inverse weighting, quantified: on a tabular
/// process with known propensities and known conditional means, the sample
/// variance of the weighted pseudo-outcomes exceeds the sample variance of
/// the conditional means by `E[m₁²(1/π − 1)] + E[Var[Y|S, A=1]/π]`.
#[test]
fn inverse_weighting_inflates_pseudo_outcome_variance() {
    let scm = confounded_fixture();
    let data = scm.generate(400, 7, "all").unwrap();
    let a_bar = arr2(&[[1.0]]);

    let mut weighted = Vec::new();
    let mut cond_means = Vec::new();
    let mut gap_terms = Vec::new();
    for tr in &data.trajectories {
        let rows = ipw_pseudo_outcomes(tr, &tr.true_propensities, &a_bar, &[1.0]).unwrap();
        for row in rows {
            let (x, y) = scm.state_at(tr, row.t).unwrap();
            let m1 = scm.g_formula(x, y, &[1]).unwrap();
            let pi = tr.true_propensities[[row.t, 0]];
            weighted.push(row.value[0]);
            cond_means.push(m1);
            // Outcome levels are {0,1}: Var[Y|S, A=1] = m1(1 − m1).
            gap_terms.push(m1 * m1 * (1.0 / pi - 1.0) + m1 * (1.0 - m1) / pi);
        }
    }

    let var_ipw = sample_variance(&weighted);
    let var_reg = sample_variance(&cond_means);
    let empirical_gap = var_ipw - var_reg;
    let exact_gap = gap_terms.iter().sum::<f64>() / gap_terms.len() as f64;
    assert!(empirical_gap > 0.0, "no variance inflation: {var_ipw} vs {var_reg}");
    let ratio = empirical_gap / exact_gap;
    assert!(
        (0.6..=1.6).contains(&ratio),
        "empirical gap {empirical_gap} vs closed form {exact_gap} (ratio {ratio})"
    );
}

/// Monte-Carlo error scales as 1/√K: the spread of single-draw answers
/// across seeds must be about 10× the spread of 100-draw answers.
#[test]
fn monte_carlo_error_shrinks_with_the_square_root_of_draws() {
    let mut trajs = Vec::new();
    for i in 0..16u64 {
        let mut rng = igc_core::autodiff::StreamRng::new(5, "walk").substream_idx("traj", i);
        let mut y = Array2::zeros((8, 1));
        let mut x = Array2::zeros((8, 1));
        for s in 0..8 {
            y[[s, 0]] = if s == 0 { rng.gauss() } else { y[[s - 1, 0]] + rng.gauss() };
            x[[s, 0]] = rng.gauss();
        }
        let a = Array2::from_shape_fn((8, 1), |_| f64::from(rng.bernoulli(0.5)));
        let p = Array2::from_elem((8, 1), 0.5);
        trajs.push(Trajectory::new(i, y, x, a, vec![], p, 0.0).unwrap());
    }
    let ds = igc_core::datagen::Dataset::new(trajs, "train").unwrap();
    let cfg = McGcompConfig {
        backbone: BackboneConfig { d_h: 8, d_z: 4, dropout: 0.0, ..Default::default() },
        head_hidden: 8,
        tau: 2,
        // One epoch: the log-variance head stays near its zero init, so the
        // transition density keeps roughly unit noise for the rollout.
        schedule: FitSchedule { epochs: 1, ..Default::default() },
    };
    let fit = mc_gcomp(&ds, &cfg).unwrap();

    let query = &ds.trajectories[0];
    let a_bar = arr2(&[[1.0], [0.0]]);
    let single: Vec<f64> =
        (0..20).map(|s| fit.model.predict_capo(query, 3, &a_bar, 1, s).unwrap()[0]).collect();
    let hundred: Vec<f64> = (0..20)
        .map(|s| fit.model.predict_capo(query, 3, &a_bar, 100, 1000 + s).unwrap()[0])
        .collect();
    let ratio = (sample_variance(&single) / sample_variance(&hundred)).sqrt();
    assert!(
        (5.0..=20.0).contains(&ratio),
        "std ratio {ratio} outside [5, 20] (expected ≈ √100 = 10)"
    );
}

/// Without time-varying confounding every adjustment strategy estimates the
/// same conditional expectation: across training seeds, the four
/// estimators' answers must agree within two seed-level standard
/// deviations of each other.
#[test]
fn horizon_one_estimators_agree_on_an_unconfounded_design() {
    let dgp = TumorDgp::default(); // gamma = 0: no confounding
    let outcome = dgp.generate(48, 21, "outcome").unwrap();
    let nuisance = dgp.generate(48, 22, "nuisance").unwrap();
    let held = dgp.generate(8, 23, "eval").unwrap();
    let a_bar = arr2(&[[1.0, 1.0]]); // both treatments on for one step
    let t = 10;

    let model_cfg = ModelConfig { backbone: small_backbone(), head_hidden: 12, tau: 1 };
    let schedule = |seed: u64| FitSchedule { epochs: 6, batch_size: 16, seed, ..Default::default() };
    let train_cfg = |seed: u64| TrainConfig { epochs: 6, batch_size: 16, seed, ..Default::default() };

    let mean_over_queries = |f: &dyn Fn(&Trajectory) -> f64| {
        held.trajectories.iter().map(f).sum::<f64>() / held.trajectories.len() as f64
    };

    let seeds = [1u64, 2, 3];
    let mut results: Vec<(&str, Vec<f64>)> = Vec::new();

    let mut igc = Vec::new();
    let mut hist = Vec::new();
    let mut ipw = Vec::new();
    let mut mc = Vec::new();
    for &seed in &seeds {
        let out = train(&outcome, &model_cfg, &train_cfg(seed)).unwrap();
        igc.push(mean_over_queries(&|tr| out.model.predict_capo(tr, t, &a_bar).unwrap()[0]));

        let out = train_history_regressor(&outcome, &model_cfg, &train_cfg(seed)).unwrap();
        hist.push(mean_over_queries(&|tr| out.model.predict_capo(tr, t, &a_bar).unwrap()[0]));

        let prop_cfg = PropensityConfig {
            backbone: small_backbone(),
            head_hidden: 12,
            schedule: schedule(seed),
            ..Default::default()
        };
        let prop = fit_propensity(&nuisance, &prop_cfg).unwrap();
        let ipw_cfg = IpwConfig {
            backbone: small_backbone(),
            head_hidden: 12,
            tau: 1,
            schedule: schedule(seed),
            ..Default::default()
        };
        let fit = ipw_regress(&outcome, &prop.model, &a_bar, &ipw_cfg).unwrap();
        ipw.push(mean_over_queries(&|tr| fit.model.predict_capo(tr, t).unwrap()[0]));

        let mc_cfg = McGcompConfig {
            backbone: small_backbone(),
            head_hidden: 12,
            tau: 1,
            schedule: schedule(seed),
        };
        let fit = mc_gcomp(&outcome, &mc_cfg).unwrap();
        mc.push(mean_over_queries(&|tr| fit.model.predict_capo(tr, t, &a_bar, 1, 0).unwrap()[0]));
    }
    results.push(("igc", igc));
    results.push(("history", hist));
    results.push(("ipw", ipw));
    results.push(("mc-gcomp", mc));

    let stats: Vec<(&str, f64, f64)> = results
        .iter()
        .map(|(name, xs)| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            (*name, mean, sample_variance(xs).sqrt())
        })
        .collect();
    // Floor guards the comparison against bit-identical pairs (igc and the
    // history regressor coincide exactly at this horizon), where the seed
    // spread understates nothing but division would be degenerate.
    let floor = 0.02 * outcome.outcome_std()[0];
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            let (name_i, mean_i, std_i) = stats[i];
            let (name_j, mean_j, std_j) = stats[j];
            let tol = (2.0 * (std_i + std_j)).max(floor);
            assert!(
                (mean_i - mean_j).abs() <= tol,
                "{name_i} ({mean_i:.3} ± {std_i:.3}) and {name_j} ({mean_j:.3} ± {std_j:.3}) \
                 disagree beyond {tol:.3}"
            );
        }
    }
}
