//! Treatment-assignment model: per-step probabilities of each binary
//! treatment dimension given the encoded history.
//!
//! This is the nuisance model behind [`super::ipw_regress`]. It shares the
//! history encoders with the outcome models and emits, for every step `t`,
//! `π̂(A_t = 1 | H̄_t)` per treatment dimension — the encoding at `t` sees
//! `(Y_t, X_t, A_{t−1})` but never `A_t` itself. Predictions are clamped to
//! `[ε, 1−ε]` so downstream inverse weights stay finite even on perfectly
//! separable data.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Binder, Graph, ParamStore, StreamRng, Tensor};
use crate::backbone::{Backbone, BackboneConfig, HistoryDims, HistorySlice};
use crate::datagen::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::model::{HeadParams, Standardizer};

use super::{run_sgd, FitSchedule};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropensityConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    /// Clip bound: predicted probabilities are clamped to `[eps, 1−eps]`.
    pub eps: f64,
    pub schedule: FitSchedule,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            backbone: BackboneConfig::default(),
            head_hidden: 32,
            eps: 0.01,
            schedule: FitSchedule::default(),
        }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be >= 1".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("clip bound {} outside (0, 0.5)", self.eps)));
        }
        Ok(())
    }
}

/// A fitted treatment-assignment model.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub config: PropensityConfig,
    pub dims: HistoryDims,
    /// Split label of the data this model was fitted on; outcome
    /// regressions enforce honest splitting against it.
    pub fit_split: String,
    pub standardizer: Standardizer,
    pub store: ParamStore,
    backbone: Backbone,
    head: HeadParams,
}

impl PropensityModel {
    #[cfg(test)]
    fn new(
        config: PropensityConfig,
        dims: HistoryDims,
        standardizer: Standardizer,
        fit_split: String,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let backbone = Backbone::register(&mut store, "enc", config.backbone.clone(), dims)?;
        let head = HeadParams::register(
            &mut store,
            "prop",
            config.backbone.d_z,
            config.head_hidden,
            dims.d_a,
        );
        Ok(PropensityModel { config, dims, fit_split, standardizer, store, backbone, head })
    }

    /// `π̂(A_t = 1 | H̄_t)` for every step and treatment dimension,
    /// `[T, d_a]`, clamped to `[eps, 1−eps]`.
    pub fn predict_probs(&self, traj: &Trajectory) -> Result<Array2<f64>> {
        let std_traj = self.standardizer.apply(traj);
        let slice = HistorySlice::factual(&std_traj, std_traj.len() - 1)?;
        let g = Graph::new();
        let mut binder = Binder::new(&g, &self.store);
        let mut rng = StreamRng::new(0, "propensity-eval");
        let z = self.backbone.forward(&g, &mut binder, &self.store, &slice, false, &mut rng)?;
        let logits = self.head.forward(&g, &mut binder, &self.store, &z, 0.0, false, &mut rng)?;
        let probs = g.sigmoid(&logits)?;
        let data = probs.data();
        let eps = self.config.eps;
        let mut out = Array2::zeros((std_traj.len(), self.dims.d_a));
        for s in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[[s, j]] = data[[s, j]].clamp(eps, 1.0 - eps);
            }
        }
        Ok(out)
    }
}

/// One reliability-diagram bin: predictions falling in `[lo, hi)` against
/// the empirical treatment rate among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean predicted probability in the bin (0 when the bin is empty).
    pub mean_predicted: f64,
    /// Fraction of those steps actually treated (0 when the bin is empty).
    pub empirical_rate: f64,
    pub count: usize,
}

/// A fitted model plus its training diagnostics.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub model: PropensityModel,
    /// Mean binary cross-entropy per epoch.
    pub loss_history: Vec<f64>,
    /// Reliability diagram over the fitting data, one bin per decile.
    pub calibration: Vec<CalibrationBin>,
    /// Treatment dimensions whose labels were all one class — the model
    /// still fits, but its probabilities there carry no signal.
    pub degenerate_dims: Vec<usize>,
}

/// Fits per-step binary cross-entropy of `A_t` against the encoded history.
pub fn fit_propensity(dataset: &Dataset, config: &PropensityConfig) -> Result<PropensityFit> {
    config.validate()?;
    let dims = HistoryDims::of_dataset(dataset);
    let standardizer = Standardizer::fit(dataset);

    let mut degenerate_dims = Vec::new();
    for j in 0..dataset.d_a {
        let (mut any0, mut any1) = (false, false);
        for tr in &dataset.trajectories {
            for v in tr.a.column(j) {
                if *v == 1.0 {
                    any1 = true;
                } else {
                    any0 = true;
                }
            }
        }
        if !(any0 && any1) {
            degenerate_dims.push(j);
        }
    }

    let slices: Vec<HistorySlice> = dataset
        .trajectories
        .iter()
        .map(|tr| HistorySlice::factual(&standardizer.apply(tr), tr.len() - 1))
        .collect::<Result<_>>()?;
    let labels: Vec<Arr> = dataset.trajectories.iter().map(|tr| tr.a.clone().into_dyn()).collect();

    let mut store = ParamStore::new(config.schedule.seed);
    let backbone = Backbone::register(&mut store, "enc", config.backbone.clone(), dims)?;
    let head = HeadParams::register(
        &mut store,
        "prop",
        config.backbone.d_z,
        config.head_hidden,
        dims.d_a,
    );
    let dropout = config.backbone.dropout;
    let (store, loss_history, _) = run_sgd(
        store,
        slices.len(),
        &config.schedule,
        "fit_propensity",
        |g, binder, store, pos, rng| {
            let z = backbone.forward(g, binder, store, &slices[pos], true, rng)?;
            let logits = head.forward(g, binder, store, &z, dropout, true, rng)?;
            bce_with_logits(g, &logits, &labels[pos])
        },
        |_| false,
    )?;

    let model = PropensityModel {
        config: config.clone(),
        dims,
        fit_split: dataset.split_label.clone(),
        standardizer,
        store,
        backbone,
        head,
    };
    let calibration = calibration_bins(&model, dataset)?;
    Ok(PropensityFit { model, loss_history, calibration, degenerate_dims })
}

/// Numerically stable mean binary cross-entropy from logits:
/// `max(x,0) − x·y + log(1 + exp(−|x|))`, averaged over all entries.
fn bce_with_logits(g: &Graph, logits: &Tensor, labels: &Arr) -> Result<Tensor> {
    let y = Tensor::constant(labels.clone());
    let pos = g.relu(logits)?;
    let abs = g.add(&pos, &g.relu(&g.affine(logits, -1.0, 0.0)?)?)?;
    let log1p = g.log(&g.affine(&g.exp(&g.affine(&abs, -1.0, 0.0)?)?, 1.0, 1.0)?)?;
    g.mean(&g.add(&g.sub(&pos, &g.mul(logits, &y)?)?, &log1p)?)
}

fn calibration_bins(model: &PropensityModel, dataset: &Dataset) -> Result<Vec<CalibrationBin>> {
    let mut sums = [0.0; 10];
    let mut hits = [0.0; 10];
    let mut counts = [0usize; 10];
    for tr in &dataset.trajectories {
        let probs = model.predict_probs(tr)?;
        for s in 0..tr.len() {
            for j in 0..dataset.d_a {
                let p = probs[[s, j]];
                let b = ((p * 10.0).floor() as usize).min(9);
                sums[b] += p;
                hits[b] += tr.a[[s, j]];
                counts[b] += 1;
            }
        }
    }
    Ok((0..10)
        .map(|b| CalibrationBin {
            lo: b as f64 / 10.0,
            hi: (b + 1) as f64 / 10.0,
            mean_predicted: if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 },
            empirical_rate: if counts[b] > 0 { hits[b] / counts[b] as f64 } else { 0.0 },
            count: counts[b],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn tiny_config() -> PropensityConfig {
        PropensityConfig {
            backbone: BackboneConfig { d_h: 8, d_z: 4, dropout: 0.0, ..Default::default() },
            head_hidden: 8,
            schedule: FitSchedule { epochs: 5, batch_size: 8, ..Default::default() },
            ..Default::default()
        }
    }

    fn zeroed_model(eps: f64) -> PropensityModel {
        let dims = HistoryDims { d_y: 1, d_x: 0, d_a: 1, n_static: 0 };
        let mut model = PropensityModel::new(
            PropensityConfig { eps, ..tiny_config() },
            dims,
            Standardizer::identity(1, 0),
            "nuisance".into(),
            3,
        )
        .unwrap();
        let ids: Vec<_> = model
            .store
            .iter()
            .map(|(name, arr)| (name.to_string(), arr.raw_dim()))
            .collect();
        for (name, dim) in ids {
            let id = model.store.id_of(&name).unwrap();
            model.store.set(id, Arr::zeros(dim)).unwrap();
        }
        model
    }

    fn coin_trajectory(t_len: usize, seed: u64) -> Trajectory {
        let mut rng = StreamRng::new(seed, "coin");
        let y = Array2::from_shape_fn((t_len, 1), |_| rng.gauss());
        let a = Array2::from_shape_fn((t_len, 1), |_| f64::from(rng.bernoulli(0.5)));
        let p = Array2::from_elem((t_len, 1), 0.5);
        Trajectory::new(0, y, Array2::zeros((t_len, 0)), a, vec![], p, 0.0).unwrap()
    }

    #[test]
    fn cross_entropy_matches_the_closed_form() {
        let g = Graph::new();
        // Zero logits: every entry costs ln 2 regardless of the label.
        let zero = Tensor::constant(Arr::zeros(ndarray::IxDyn(&[2, 1])));
        let labels = arr2(&[[1.0], [0.0]]).into_dyn();
        let loss = bce_with_logits(&g, &zero, &labels).unwrap().value().unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15, "{loss}");
        // Hand values: x=2 with y=1 costs ln(1+e^{-2}); x=-1 with y=0 costs
        // ln(1+e^{-1}).
        let logits = Tensor::constant(arr2(&[[2.0], [-1.0]]).into_dyn());
        let loss = bce_with_logits(&g, &logits, &labels).unwrap().value().unwrap();
        let want = ((1.0 + (-2.0_f64).exp()).ln() + (1.0 + (-1.0_f64).exp()).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-15, "{loss} vs {want}");
    }

    #[test]
    fn saturated_logits_are_clipped_to_the_bounds_without_infinities() {
        let mut model = zeroed_model(0.01);
        let b2 = model.store.id_of("prop/b2").unwrap();
        model.store.set(b2, Arr::from_elem(ndarray::IxDyn(&[1]), 50.0)).unwrap();
        let probs = model.predict_probs(&coin_trajectory(5, 1)).unwrap();
        assert!(probs.iter().all(|p| *p == 0.99), "{probs:?}");
        model.store.set(b2, Arr::from_elem(ndarray::IxDyn(&[1]), -50.0)).unwrap();
        let probs = model.predict_probs(&coin_trajectory(5, 1)).unwrap();
        assert!(probs.iter().all(|p| *p == 0.01), "{probs:?}");
    }

    #[test]
    fn calibration_puts_constant_predictions_in_one_exact_bin() {
        let model = zeroed_model(0.01); // all logits 0 -> every p̂ = 0.5
        let mut trajs = Vec::new();
        for i in 0..4 {
            let mut tr = coin_trajectory(6, 10 + i);
            // Force a known overall treatment rate: 1 on even steps.
            for s in 0..6 {
                tr.a[[s, 0]] = f64::from(s % 2 == 0);
            }
            trajs.push(tr);
        }
        let ds = Dataset::new(trajs, "train").unwrap();
        let bins = calibration_bins(&model, &ds).unwrap();
        assert_eq!(bins.len(), 10);
        for (b, bin) in bins.iter().enumerate() {
            if b == 5 {
                assert_eq!(bin.count, 24);
                assert_eq!(bin.mean_predicted, 0.5);
                assert_eq!(bin.empirical_rate, 0.5);
            } else {
                assert_eq!(bin.count, 0);
            }
        }
    }

    #[test]
    fn one_class_labels_are_flagged_not_fatal() {
        let mut trajs = Vec::new();
        for i in 0..6 {
            let mut tr = coin_trajectory(5, 20 + i);
            tr.a.fill(1.0);
            trajs.push(tr);
        }
        let ds = Dataset::new(trajs, "train").unwrap();
        let fit = fit_propensity(&ds, &tiny_config()).unwrap();
        assert_eq!(fit.degenerate_dims, vec![0]);
    }

    #[test]
    fn confounded_assignment_is_learned_past_chance_level() {
        // Treatment follows the sign of the current outcome: a fit must
        // beat the ln 2 coin-flip cross-entropy.
        let mut trajs = Vec::new();
        for i in 0..24 {
            let mut rng = StreamRng::new(31, "sep").substream_idx("traj", i);
            let y = Array2::from_shape_fn((6, 1), |_| rng.gauss());
            let a = Array2::from_shape_fn((6, 1), |(s, _)| f64::from(y[[s, 0]] > 0.0));
            let p = Array2::from_shape_fn((6, 1), |(s, _)| f64::from(y[[s, 0]] > 0.0));
            trajs.push(Trajectory::new(i, y, Array2::zeros((6, 0)), a, vec![], p, 0.0).unwrap());
        }
        let ds = Dataset::new(trajs, "train").unwrap();
        let cfg = PropensityConfig {
            schedule: FitSchedule { epochs: 30, lr: 1e-2, ..Default::default() },
            ..tiny_config()
        };
        let fit = fit_propensity(&ds, &cfg).unwrap();
        let last = *fit.loss_history.last().unwrap();
        assert!(last < 0.5 * 2.0_f64.ln(), "final cross-entropy {last} not below chance");
        // Same seed, same run.
        let again = fit_propensity(&ds, &cfg).unwrap();
        assert_eq!(fit.loss_history, again.loss_history);
    }
}
