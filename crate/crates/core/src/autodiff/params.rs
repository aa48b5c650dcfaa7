//! Named parameter storage, initialization, and per-pass binding.
//!
//! Parameters live outside any graph as plain arrays; each training or
//! inference pass binds the ones it needs onto a fresh [`Graph`] through a
//! [`Binder`], which guarantees one leaf per parameter per pass (so
//! gradients for weights shared across time steps accumulate correctly).
//!
//! Initialization draws from an RNG stream keyed by the parameter *name*
//! rather than by registration order, so two models that share a subset of
//! parameter names initialize that subset identically under the same seed.

use super::graph::{Graph, Tensor};
use super::ops::Arr;
use super::rng::StreamRng;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamStore {
    /// `seed` drives all weight initialization streams.
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, names: Vec::new(), values: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a parameter with an explicit value. Names must be unique.
    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform matrix: `U(±sqrt(6/(fan_in + fan_out)))`, drawn from
    /// the stream `init/<name>`.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = StreamRng::new(self.seed, &format!("init/{name}"));
        let value = Arr::from_shape_fn(ndarray::IxDyn(&[fan_in, fan_out]), |_| {
            rng.uniform_range(-limit, limit)
        });
        self.add(name, value)
    }

    /// Zero-initialized parameter (biases, positional bias tables).
    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Arr::zeros(ndarray::IxDyn(shape)))
    }

    /// Constant-initialized parameter (e.g. LSTM forget-gate bias).
    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Arr::from_elem(ndarray::IxDyn(shape), v))
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Overwrites a parameter value, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Arr) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Arr] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arr] {
        &mut self.values
    }

    /// Looks a parameter up by name (checkpoint loading).
    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Arr::len).sum()
    }
}

/// Per-pass binding of store parameters onto a graph.
pub struct Binder {
    graph: Graph,
    slots: Vec<Option<Tensor>>,
}

impl Binder {
    pub fn new(graph: &Graph, store: &ParamStore) -> Self {
        Binder { graph: graph.clone(), slots: vec![None; store.len()] }
    }

    /// Leaf tensor for this parameter, created on first use and cached so
    /// repeated use shares one node.
    pub fn get(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if self.slots[id.0].is_none() {
            self.slots[id.0] = Some(self.graph.param(store.get(id)));
        }
        self.slots[id.0].clone().expect("just bound")
    }

    /// Bound tensor per store slot (None where never used this pass).
    pub fn slots(&self) -> &[Option<Tensor>] {
        &self.slots
    }
}
