//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! Design goals, in order: correctness (every op is verified against
//! central finite differences), determinism (bit-identical gradients from
//! identical seeds and inputs), and enough speed for desk-scale sequence
//! models. The engine is tape-based: ops record nodes on a [`Graph`], and a
//! single reverse sweep computes all gradients.
//!
//! * [`graph`] — the tape, [`Tensor`] values, op wrappers, backward sweep;
//! * [`ops`] — pure forward kernels shared with the gradient checker;
//! * [`params`] — named parameter storage and per-pass binding;
//! * [`adam`] — bias-corrected Adam and global-norm clipping;
//! * [`rng`] — counter-based named random streams;
//! * [`gradcheck`] — the finite-difference oracle and the standard op suite.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod rng;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Tensor};
pub use ops::Arr;
pub use params::{Binder, ParamId, ParamStore};
pub use rng::StreamRng;
