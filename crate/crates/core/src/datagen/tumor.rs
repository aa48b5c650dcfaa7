//! Tumor-growth data generating process.
//!
//! Volumes follow a discrete-time Gompertz-style law with chemotherapy and
//! radiotherapy kill terms and multiplicative noise:
//!
//! `Y_{t+1} = (1 + rho·ln(K/Y_t) − alpha_c·c_t − (alpha_r·d_t + beta_r·d_t²)
//!            + omega·U + eps_t) · Y_t`
//!
//! Both treatments are assigned concurrently with probability
//! `sigma(rho_overlap · (gamma/D_max · (Dbar15 − D_max/2) [+ 0.2·U]))`,
//! where `Dbar15` is the mean tumor *diameter* over the 15 most recent
//! observed volumes (converted through spherical geometry). `gamma` scales
//! the dependence of assignment on recent size — i.e. the strength of
//! time-varying confounding — and `rho_overlap` scales the whole logit to
//! stress overlap. With `omega > 0` an unobserved per-patient factor `U`
//! both shifts the growth rate and leaks into the assignment logit.
//!
//! Growth/kill coefficients follow the radiotherapy literature
//! (`alpha_r = 0.0398`, `beta_r = alpha_r/10`); the remaining magnitudes
//! (growth rate, doses, noise, initial size spread) are chosen so that
//! treatment effects, confounding, and growth are all visible over a
//! 20-step desk-scale horizon, and are documented on [`TumorParams`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_query_bounds, sigmoid_scalar, Dataset, Dgp, OracleValue, Trajectory};
use crate::autodiff::StreamRng;
use crate::error::{Error, Result};

/// Volume of a sphere with the given diameter (cm -> cm^3).
pub fn diameter_to_volume(d: f64) -> f64 {
    std::f64::consts::PI / 6.0 * d.powi(3)
}

/// Diameter of a sphere with the given volume (cm^3 -> cm).
pub fn volume_to_diameter(v: f64) -> f64 {
    (6.0 * v / std::f64::consts::PI).cbrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TumorParams {
    /// Trajectory lengths are drawn uniformly from `t_min..=t_max`
    /// (equal values give fixed-length datasets).
    pub t_min: usize,
    pub t_max: usize,
    /// Confounding strength: weight of recent diameter in the logit.
    pub gamma: f64,
    /// Overlap knob: scales the whole assignment logit.
    pub rho_overlap: f64,
    /// Unobserved-confounder weight in the growth rate (0 disables U).
    pub omega: f64,
    /// Additive logit shift `unobs_logit_shift * U` applied when omega > 0.
    pub unobs_logit_shift: f64,
    /// Gompertz growth coefficient.
    pub rho_growth: f64,
    /// Chemotherapy kill coefficient (per unit concentration).
    pub alpha_chemo: f64,
    /// Drug concentration delivered when chemo is on.
    pub chemo_concentration: f64,
    /// Linear radiotherapy kill coefficient (per Gy).
    pub alpha_radio: f64,
    /// Quadratic radiotherapy kill coefficient (alpha_radio / 10).
    pub beta_radio: f64,
    /// Radiotherapy dose in Gy when radio is on.
    pub radio_dose: f64,
    /// Death-threshold diameter in cm; volumes are capped at its volume.
    pub d_max: f64,
    /// Carrying-capacity diameter in cm (K is its volume).
    pub k_diameter: f64,
    /// Diameter-averaging window for treatment assignment.
    pub diam_window: usize,
    /// Std of the multiplicative growth noise eps_t.
    pub sigma_eps: f64,
    /// Initial tumor diameter is uniform over this range (cm).
    pub init_diameter: (f64, f64),
    /// Volumes are floored here to keep the dynamics well-defined.
    pub volume_floor: f64,
    /// Monte-Carlo draws for noisy counterfactual oracles.
    pub oracle_draws: usize,
}

impl Default for TumorParams {
    fn default() -> Self {
        TumorParams {
            t_min: 20,
            t_max: 20,
            gamma: 0.0,
            rho_overlap: 1.0,
            omega: 0.0,
            unobs_logit_shift: 0.2,
            rho_growth: 0.025,
            alpha_chemo: 0.028,
            chemo_concentration: 5.0,
            alpha_radio: 0.0398,
            beta_radio: 0.00398,
            radio_dose: 2.0,
            d_max: 13.0,
            k_diameter: 30.0,
            diam_window: 15,
            sigma_eps: 0.03,
            init_diameter: (1.0, 12.0),
            volume_floor: 0.01,
            oracle_draws: 2000,
        }
    }
}

impl TumorParams {
    /// Carrying capacity K as a volume.
    pub fn carrying_capacity(&self) -> f64 {
        diameter_to_volume(self.k_diameter)
    }

    /// Volume cap corresponding to the death-threshold diameter.
    pub fn volume_cap(&self) -> f64 {
        diameter_to_volume(self.d_max)
    }
}

/// One step of the volume dynamics given applied doses and realized noise.
pub fn tumor_step(volume: f64, chemo: f64, radio: f64, eps: f64, u: f64, p: &TumorParams) -> f64 {
    let growth = p.rho_growth * (p.carrying_capacity() / volume).ln();
    let kill = p.alpha_chemo * chemo + p.alpha_radio * radio + p.beta_radio * radio * radio;
    let next = (1.0 + growth - kill + p.omega * u + eps) * volume;
    next.clamp(p.volume_floor, p.volume_cap())
}

/// Assignment probability at step `t` given the observed volume history
/// `volumes[0..=t]` and the unobserved factor `u`.
///
/// The averaging window ends at `t-1` (the assignment reacts to *past*
/// measurements); at `t = 0` it falls back to the initial volume.
pub fn assignment_probability(volumes: &[f64], t: usize, u: f64, p: &TumorParams) -> f64 {
    let (lo, hi) = if t == 0 { (0, 1) } else { (t.saturating_sub(p.diam_window), t) };
    let window = &volumes[lo..hi];
    let dbar = window.iter().map(|v| volume_to_diameter(*v)).sum::<f64>() / window.len() as f64;
    let mut logit = p.gamma / p.d_max * (dbar - p.d_max / 2.0);
    if p.omega > 0.0 {
        logit += p.unobs_logit_shift * u;
    }
    sigmoid_scalar(p.rho_overlap * logit)
}

/// The tumor process as a benchmark generator (`d_y = 1`, `d_x = 0`,
/// `d_a = 2`: chemo and radio).
#[derive(Debug, Clone, Default)]
pub struct TumorDgp {
    pub params: TumorParams,
}

impl TumorDgp {
    pub fn new(params: TumorParams) -> Self {
        TumorDgp { params }
    }

    fn simulate(&self, seed: u64, idx: u64) -> Result<Trajectory> {
        let p = &self.params;
        if p.t_min < 2 || p.t_max < p.t_min {
            return Err(Error::contract("tumor", "need 2 <= t_min <= t_max"));
        }
        let root = StreamRng::new(seed, "tumor").substream_idx("traj", idx);
        let mut latent = root.substream("latent");
        let u = latent.gauss();
        let d0 = latent.uniform_range(p.init_diameter.0, p.init_diameter.1);
        let t = if p.t_min == p.t_max {
            p.t_min
        } else {
            p.t_min + latent.below((p.t_max - p.t_min + 1) as u64) as usize
        };
        let mut assign = root.substream("assign");
        let mut noise = root.substream("noise");
        let mut volumes = Vec::with_capacity(t);
        volumes.push(diameter_to_volume(d0).clamp(p.volume_floor, p.volume_cap()));
        let mut a = Array2::<f64>::zeros((t, 2));
        let mut props = Array2::<f64>::zeros((t, 2));
        for step in 0..t {
            let prob = assignment_probability(&volumes, step, u, p);
            let chemo_on = assign.bernoulli(prob);
            let radio_on = assign.bernoulli(prob);
            a[[step, 0]] = chemo_on as u8 as f64;
            a[[step, 1]] = radio_on as u8 as f64;
            props[[step, 0]] = prob;
            props[[step, 1]] = prob;
            if step + 1 < t {
                let eps = p.sigma_eps * noise.gauss();
                let next = tumor_step(
                    volumes[step],
                    a[[step, 0]] * p.chemo_concentration,
                    a[[step, 1]] * p.radio_dose,
                    eps,
                    u,
                    p,
                );
                volumes.push(next);
            }
        }
        let y = Array2::from_shape_vec((t, 1), volumes).expect("length matches");
        Trajectory::new(idx, y, Array2::zeros((t, 0)), a, vec![], props, u)
    }
}

impl Dgp for TumorDgp {
    fn name(&self) -> String {
        "tumor".into()
    }

    fn generate(&self, n: usize, seed: u64, split_label: &str) -> Result<Dataset> {
        let trajectories: Vec<Trajectory> = (0..n)
            .map(|i| self.simulate(seed, i as u64))
            .collect::<Result<_>>()?;
        Dataset::new(trajectories, split_label)
    }

    /// Counterfactual rollout from the state at `t` under forced treatments.
    /// Noise draws are keyed by `(oracle_seed, trajectory, t, draw, step)`
    /// and shared across different `a_seq`, so contrasts between treatment
    /// sequences are low-variance. With `sigma_eps = 0` the rollout is a
    /// deterministic recursion.
    fn capo_oracle(
        &self,
        traj: &Trajectory,
        t: usize,
        a_seq: &Array2<f64>,
        oracle_seed: u64,
    ) -> Result<OracleValue> {
        let p = &self.params;
        let tau = a_seq.nrows();
        check_query_bounds("tumor_oracle", traj, t, tau)?;
        if a_seq.ncols() != 2 {
            return Err(Error::shape(
                "tumor_oracle",
                format!("expected 2 treatment dims, got {}", a_seq.ncols()),
            ));
        }
        let deterministic = p.sigma_eps == 0.0;
        let draws = if deterministic { 1 } else { p.oracle_draws.max(2) };
        let base = StreamRng::new(oracle_seed, "tumor-oracle")
            .substream_idx("traj", traj.id)
            .substream_idx("t", t as u64);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for k in 0..draws {
            let mut noise = base.substream_idx("draw", k as u64);
            let mut v = traj.y[[t, 0]];
            for (delta, dose) in a_seq.rows().into_iter().enumerate() {
                let eps = if deterministic { 0.0 } else { p.sigma_eps * noise.gauss() };
                let _ = delta;
                v = tumor_step(
                    v,
                    dose[0] * p.chemo_concentration,
                    dose[1] * p.radio_dose,
                    eps,
                    traj.u,
                    p,
                );
            }
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / draws as f64;
        let se = if deterministic {
            0.0
        } else {
            let var = (sumsq / draws as f64 - mean * mean).max(0.0);
            (var / (draws as f64 - 1.0)).sqrt()
        };
        Ok(OracleValue {
            value: vec![mean],
            se: vec![se],
            method: if deterministic { "deterministic-rollout" } else { "mc-shared-noise" }.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn untreated_noiseless_growth_rises_toward_the_cap() {
        let p = TumorParams { sigma_eps: 0.0, ..Default::default() };
        let mut v = diameter_to_volume(2.0);
        let mut prev = v;
        for _ in 0..4000 {
            v = tumor_step(v, 0.0, 0.0, 0.0, 0.0, &p);
            assert!(v >= prev, "growth must be monotone below the cap");
            prev = v;
        }
        assert!((v - p.volume_cap()).abs() < 1e-6, "long-run volume {v} should sit at the cap");
    }

    #[test]
    fn treatment_strictly_shrinks_the_next_volume() {
        let p = TumorParams { sigma_eps: 0.0, ..Default::default() };
        let v = diameter_to_volume(8.0);
        let untreated = tumor_step(v, 0.0, 0.0, 0.0, 0.0, &p);
        let chemo = tumor_step(v, p.chemo_concentration, 0.0, 0.0, 0.0, &p);
        let both = tumor_step(v, p.chemo_concentration, p.radio_dose, 0.0, 0.0, &p);
        assert!(chemo < untreated);
        assert!(both < chemo);
    }

    #[test]
    fn volumes_stay_within_floor_and_cap() {
        let p = TumorParams { gamma: 20.0, sigma_eps: 0.3, ..Default::default() };
        let ds = TumorDgp::new(p.clone()).generate(30, 7, "test").unwrap();
        for tr in &ds.trajectories {
            for v in tr.y.iter() {
                assert!(*v >= p.volume_floor && *v <= p.volume_cap());
            }
        }
    }

    #[test]
    fn gamma_zero_gives_constant_half_propensity() {
        let ds = TumorDgp::default().generate(5, 3, "test").unwrap();
        for tr in &ds.trajectories {
            assert!(tr.true_propensities.iter().all(|p| *p == 0.5));
        }
    }

    #[test]
    fn gamma_positive_treats_large_tumors_more() {
        let p = TumorParams { gamma: 10.0, ..Default::default() };
        let big = [diameter_to_volume(12.0); 6];
        let small = [diameter_to_volume(2.0); 6];
        let p_big = assignment_probability(&big, 5, 0.0, &p);
        let p_small = assignment_probability(&small, 5, 0.0, &p);
        assert!(p_big > 0.9, "large tumors should almost surely be treated ({p_big})");
        assert!(p_small < 0.1, "small tumors should rarely be treated ({p_small})");
    }

    #[test]
    fn generation_is_bit_deterministic_and_index_pure() {
        let dgp = TumorDgp::new(TumorParams { gamma: 10.0, ..Default::default() });
        let a = dgp.generate(10, 42, "test").unwrap();
        let b = dgp.generate(10, 42, "test").unwrap();
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.y, tb.y);
            assert_eq!(ta.a, tb.a);
        }
        // Trajectory i is the same regardless of how many are generated.
        let c = dgp.generate(3, 42, "test").unwrap();
        assert_eq!(a.trajectories[2].y, c.trajectories[2].y);
    }

    #[test]
    fn noiseless_oracle_equals_direct_recursion_with_zero_se() {
        let p = TumorParams { sigma_eps: 0.0, ..Default::default() };
        let dgp = TumorDgp::new(p.clone());
        let ds = dgp.generate(2, 11, "test").unwrap();
        let tr = &ds.trajectories[0];
        let a_seq = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let oracle = dgp.capo_oracle(tr, 4, &a_seq, 99).unwrap();
        let mut v = tr.y[[4, 0]];
        v = tumor_step(v, p.chemo_concentration, 0.0, 0.0, tr.u, &p);
        v = tumor_step(v, 0.0, p.radio_dose, 0.0, tr.u, &p);
        assert_eq!(oracle.value[0], v);
        assert_eq!(oracle.se[0], 0.0);
        assert_eq!(oracle.method, "deterministic-rollout");
    }

    #[test]
    fn lengths_are_drawn_from_the_configured_range() {
        let dgp = TumorDgp::new(TumorParams { t_min: 10, t_max: 16, ..Default::default() });
        let ds = dgp.generate(40, 9, "test").unwrap();
        let lens: Vec<usize> = ds.trajectories.iter().map(Trajectory::len).collect();
        assert!(lens.iter().all(|l| (10..=16).contains(l)));
        assert!(lens.iter().any(|l| *l != lens[0]), "lengths should vary across units");
        let again = dgp.generate(40, 9, "test").unwrap();
        let lens2: Vec<usize> = again.trajectories.iter().map(Trajectory::len).collect();
        assert_eq!(lens, lens2);
    }

    #[test]
    fn oracle_rejects_out_of_range_queries() {
        let dgp = TumorDgp::default();
        let ds = dgp.generate(1, 5, "test").unwrap();
        let a_seq = arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        assert!(dgp.capo_oracle(&ds.trajectories[0], 18, &a_seq, 1).is_err());
        assert!(dgp.capo_oracle(&ds.trajectories[0], 17, &a_seq, 1).is_ok());
    }
}
