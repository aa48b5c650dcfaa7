//! Estimation of conditional average potential outcomes (CAPOs) under
//! time-varying confounding.
//!
//! The centerpiece is a regression-based iterative G-computation estimator
//! ([`model::IgcModel`]): a sequence backbone (LSTM or multi-input
//! transformer) encodes patient histories into a balanced representation,
//! and a chain of per-horizon regression heads is trained end-to-end
//! against self-generated pseudo-outcomes so that the head at horizon zero
//! converges to the G-computation formula rather than to the confounded
//! conditional expectation.
//!
//! Around the estimator the crate provides:
//!
//! * [`autodiff`] — a small reverse-mode automatic differentiation engine
//!   (f64 tape, Adam optimizer, counter-based RNG streams) that everything
//!   else is built on;
//! * [`backbone`] — history encoders shared by all neural estimators;
//! * [`baselines`] — simplified reference estimators: a history-adjusted
//!   outcome regressor, an inverse-propensity-weighted pseudo-outcome
//!   regressor, and a Monte-Carlo G-computation rollout model;
//! * [`datagen`] — synthetic data generating processes (tumor growth,
//!   spline-based semi-synthetic, discrete tabular SCM) that expose
//!   ground-truth counterfactuals for benchmarking;
//! * [`eval`] — RMSE metrics, exact variance comparisons, and a
//!   deterministic benchmark sweep harness;
//! * [`checkpoint`] — versioned save/load for trained estimators.
//!
//! Every run is a pure function of its configuration and seed: data
//! generation, weight initialization, minibatch shuffling, dropout masks,
//! and Monte-Carlo draws all flow from named counter-based RNG streams.

pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;

pub use error::{Error, Result};
