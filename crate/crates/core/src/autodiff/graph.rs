//! Reverse-mode differentiation graph.
//!
//! A [`Graph`] records every tracked operation as a node holding the op
//! kind, parent links, and saved input/output values. [`Graph::backward`]
//! runs one reverse sweep in creation order — creation order is already
//! topological, so each node is visited exactly once and shared
//! subexpressions accumulate gradients additively instead of exploding.
//!
//! Graphs are intentionally single-threaded (`Rc`/`RefCell`); independent
//! model instances each build their own graphs and may live on separate
//! threads. A fresh graph is built per forward/backward pass and dropped
//! afterwards, so parameters themselves live outside the graph (see
//! [`super::params::ParamStore`]) and are re-bound as leaves each pass.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Axis, Slice};

use super::ops::{self, Arr};
use super::rng::StreamRng;
use crate::error::{Error, Result};

/// Index of a node within its graph.
pub type NodeId = usize;

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Bmm { transpose_b: bool },
    Add,
    Sub,
    Mul,
    Affine { m: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Transpose,
    Sigmoid,
    Tanh,
    Relu,
    Elu { alpha: f64 },
    Exp,
    Log,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    Dropout { mask: Rc<Arr>, keep: f64 },
    Mse,
    Mean,
    Sum,
}

struct Node {
    op: Op,
    /// Parent node per input slot; `None` marks a constant input.
    parents: Vec<Option<NodeId>>,
    /// Saved input values, same order as `parents`.
    inputs: Vec<Rc<Arr>>,
    /// Saved output value.
    out: Rc<Arr>,
}

/// A value, optionally attached to a graph node.
///
/// Constants (data, masks, targets) are plain tensors with no node; leaves
/// created via [`Graph::param`] and all op outputs downstream of a leaf are
/// tracked. [`Tensor::detach`] drops the node link, which is the gradient
/// barrier used for pseudo-outcome generation.
#[derive(Debug, Clone)]
pub struct Tensor {
    data: Rc<Arr>,
    node: Option<(u64, NodeId)>,
}

impl Tensor {
    /// Untracked tensor from raw data.
    pub fn constant(data: Arr) -> Self {
        Tensor { data: Rc::new(data), node: None }
    }

    /// Untracked scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ops::scalar(v))
    }

    pub fn data(&self) -> &Arr {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> Result<f64> {
        ops::scalar_of(&self.data)
    }

    /// Same value, no graph attachment: gradients never flow past this.
    pub fn detach(&self) -> Tensor {
        Tensor { data: Rc::clone(&self.data), node: None }
    }

    /// Whether this tensor participates in differentiation.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

struct Inner {
    nodes: Vec<Node>,
}

/// Handle to a differentiation graph. Cloning shares the same graph.
#[derive(Clone)]
pub struct Graph {
    id: u64,
    inner: Rc<RefCell<Inner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            inner: Rc::new(RefCell::new(Inner { nodes: Vec::new() })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Parent id of `t` within this graph (`None` for constants), or an
    /// error if `t` belongs to a different graph.
    fn pid(&self, op: &'static str, t: &Tensor) -> Result<Option<NodeId>> {
        match t.node {
            None => Ok(None),
            Some((gid, nid)) if gid == self.id => Ok(Some(nid)),
            Some((gid, _)) => Err(Error::contract(
                op,
                format!("tensor belongs to graph {gid}, not graph {}", self.id),
            )),
        }
    }

    /// Records a node, unless every input is constant (then the result is
    /// itself a constant and needs no bookkeeping).
    fn push(&self, op: Op, parents: Vec<Option<NodeId>>, inputs: Vec<Rc<Arr>>, out: Arr) -> Tensor {
        let track = matches!(op, Op::Leaf) || parents.iter().any(Option::is_some);
        let out = Rc::new(out);
        if !track {
            return Tensor { data: out, node: None };
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, parents, inputs, out: Rc::clone(&out) });
        Tensor { data: out, node: Some((self.id, id)) }
    }

    /// Binds raw data as a tracked leaf (a parameter for this pass).
    ///
    /// Each call creates a distinct leaf: bind a parameter once per pass and
    /// reuse the returned tensor so its gradient accumulates in one place.
    pub fn param(&self, data: &Arr) -> Tensor {
        let rc = Rc::new(data.clone());
        self.push(Op::Leaf, vec![], vec![], (*rc).clone())
    }

    // ----- op wrappers ----------------------------------------------------

    fn unary(&self, op: Op, name: &'static str, x: &Tensor, out: Arr) -> Result<Tensor> {
        let p = self.pid(name, x)?;
        Ok(self.push(op, vec![p], vec![Rc::clone(&x.data)], out))
    }

    fn binary(
        &self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        out: Arr,
    ) -> Result<Tensor> {
        let pa = self.pid(name, a)?;
        let pb = self.pid(name, b)?;
        Ok(self.push(op, vec![pa, pb], vec![Rc::clone(&a.data), Rc::clone(&b.data)], out))
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::matmul(&a.data, &b.data)?;
        self.binary(Op::MatMul, "matmul", a, b, out)
    }

    pub fn bmm(&self, a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
        let out = ops::bmm(&a.data, &b.data, transpose_b)?;
        self.binary(Op::Bmm { transpose_b }, "bmm", a, b, out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::add(&a.data, &b.data)?;
        self.binary(Op::Add, "add", a, b, out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::sub(&a.data, &b.data)?;
        self.binary(Op::Sub, "sub", a, b, out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::mul(&a.data, &b.data)?;
        self.binary(Op::Mul, "mul", a, b, out)
    }

    /// `m·x + c` with scalar constants.
    pub fn affine(&self, x: &Tensor, m: f64, c: f64) -> Result<Tensor> {
        let out = ops::affine(&x.data, m, c);
        self.unary(Op::Affine { m }, "affine", x, out)
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let datas: Vec<&Arr> = parts.iter().map(|t| t.data.as_ref()).collect();
        let out = ops::concat(&datas, axis)?;
        let mut parents = Vec::with_capacity(parts.len());
        let mut inputs = Vec::with_capacity(parts.len());
        for t in parts {
            parents.push(self.pid("concat", t)?);
            inputs.push(Rc::clone(&t.data));
        }
        Ok(self.push(Op::Concat { axis }, parents, inputs, out))
    }

    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let out = ops::slice(&x.data, axis, start, end)?;
        self.unary(Op::Slice { axis, start }, "slice", x, out)
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = ops::reshape(&x.data, shape)?;
        self.unary(Op::Reshape, "reshape", x, out)
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let out = ops::transpose(&x.data)?;
        self.unary(Op::Transpose, "transpose", x, out)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Sigmoid, "sigmoid", x, ops::sigmoid(&x.data))
    }

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Tanh, "tanh", x, ops::tanh(&x.data))
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Relu, "relu", x, ops::relu(&x.data))
    }

    pub fn elu(&self, x: &Tensor, alpha: f64) -> Result<Tensor> {
        self.unary(Op::Elu { alpha }, "elu", x, ops::elu(&x.data, alpha))
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, "exp", x, ops::exp(&x.data))
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        let out = ops::log(&x.data)?;
        self.unary(Op::Log, "log", x, out)
    }

    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let out = ops::softmax_axis(&x.data, axis)?;
        self.unary(Op::Softmax { axis }, "softmax", x, out)
    }

    pub fn layer_norm(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let out = ops::layer_norm(&x.data, eps)?;
        self.unary(Op::LayerNorm { eps }, "layer_norm", x, out)
    }

    /// Inverted-scaling dropout. In eval mode (or with p = 0) this is the
    /// identity and consumes no randomness; in training mode the {0,1} mask
    /// is drawn from `rng` and saved for the backward pass.
    pub fn dropout(
        &self,
        x: &Tensor,
        p: f64,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract("dropout", format!("rate {p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(x.clone());
        }
        let mask = Arr::from_shape_fn(x.data.raw_dim(), |_| if rng.bernoulli(1.0 - p) {
            1.0
        } else {
            0.0
        });
        self.dropout_masked(x, mask, p)
    }

    /// Dropout with a caller-supplied mask (used by gradient checks).
    pub fn dropout_masked(&self, x: &Tensor, mask: Arr, p: f64) -> Result<Tensor> {
        let keep = 1.0 - p;
        let out = ops::dropout_masked(&x.data, &mask, keep)?;
        let pid = self.pid("dropout", x)?;
        Ok(self.push(
            Op::Dropout { mask: Rc::new(mask), keep },
            vec![pid],
            vec![Rc::clone(&x.data)],
            out,
        ))
    }

    /// Mean squared error over all elements; gradient at pred == target is
    /// exactly zero.
    pub fn mse(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let out = ops::mse(&pred.data, &target.data)?;
        self.binary(Op::Mse, "mse", pred, target, out)
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let out = ops::mean(&x.data)?;
        self.unary(Op::Mean, "mean", x, out)
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let out = ops::sum(&x.data)?;
        self.unary(Op::Sum, "sum", x, out)
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss.shape()),
            ));
        }
        self.backward_seeded(loss, ops::scalar(1.0))
    }

    /// Reverse sweep seeding `d(out)` with an arbitrary upstream gradient,
    /// i.e. computes the vector-Jacobian product `seedᵀ · J`.
    pub fn backward_seeded(&self, out: &Tensor, seed: Arr) -> Result<Gradients> {
        let nid = match self.pid("backward", out)? {
            Some(id) => id,
            None => return Err(Error::contract("backward", "output is not attached to the graph")),
        };
        if seed.shape() != out.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} != output {:?}", seed.shape(), out.shape()),
            ));
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Arr>> = vec![None; nid + 1];
        grads[nid] = Some(seed);

        for id in (0..=nid).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue, // not on a path from the output
            };
            let node = &inner.nodes[id];
            let contribs = Self::vjp(node, &g)?;
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (slot, contrib) in contribs.into_iter().enumerate() {
                if let Some(pid) = node.parents[slot] {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot_g => *slot_g = Some(contrib),
                    }
                }
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    /// Per-op vector-Jacobian products: gradient contribution per input slot.
    fn vjp(node: &Node, g: &Arr) -> Result<Vec<Arr>> {
        let x = |i: usize| node.inputs[i].as_ref();
        let out = node.out.as_ref();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let da = ops::matmul(g, &ops::transpose(x(1))?)?;
                let db = ops::matmul(&ops::transpose(x(0))?, g)?;
                vec![da, db]
            }
            Op::Bmm { transpose_b } => {
                if *transpose_b {
                    // out = a · bᵀ  →  da = g · b,  db = gᵀ · a  (per batch)
                    let da = ops::bmm(g, x(1), false)?;
                    let db = {
                        let gt = swap_last_two(g);
                        ops::bmm(&gt, x(0), false)?
                    };
                    vec![da, db]
                } else {
                    // out = a · b  →  da = g · bᵀ,  db = aᵀ · g
                    let da = ops::bmm(g, x(1), true)?;
                    let db = {
                        let at = swap_last_two(x(0));
                        ops::bmm(&at, g, false)?
                    };
                    vec![da, db]
                }
            }
            Op::Add => vec![
                ops::reduce_to(g, x(0).shape()),
                ops::reduce_to(g, x(1).shape()),
            ],
            Op::Sub => vec![
                ops::reduce_to(g, x(0).shape()),
                ops::reduce_to(&ops::affine(g, -1.0, 0.0), x(1).shape()),
            ],
            Op::Mul => vec![
                ops::reduce_to(&ops::mul(g, x(1))?, x(0).shape()),
                ops::reduce_to(&ops::mul(g, x(0))?, x(1).shape()),
            ],
            Op::Affine { m } => vec![ops::affine(g, *m, 0.0)],
            Op::Concat { axis } => {
                let mut outs = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for inp in &node.inputs {
                    let w = inp.shape()[*axis];
                    outs.push(ops::slice(g, *axis, offset, offset + w)?);
                    offset += w;
                }
                outs
            }
            Op::Slice { axis, start } => {
                let mut dx = Arr::zeros(x(0).raw_dim());
                let end = start + g.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..end)).assign(g);
                vec![dx]
            }
            Op::Reshape => vec![ops::reshape(g, x(0).shape())?],
            Op::Transpose => vec![ops::transpose(g)?],
            Op::Sigmoid => {
                let mut dx = out.clone();
                dx.zip_mut_with(g, |s, &gv| *s = gv * *s * (1.0 - *s));
                vec![dx]
            }
            Op::Tanh => {
                let mut dx = out.clone();
                dx.zip_mut_with(g, |t, &gv| *t = gv * (1.0 - *t * *t));
                vec![dx]
            }
            Op::Relu => {
                let mut dx = x(0).clone();
                dx.zip_mut_with(g, |v, &gv| *v = if *v > 0.0 { gv } else { 0.0 });
                vec![dx]
            }
            Op::Elu { alpha } => {
                let mut dx = Arr::zeros(out.raw_dim());
                ndarray::Zip::from(&mut dx).and(x(0)).and(out).and(g).for_each(
                    |d, &xv, &ov, &gv| {
                        *d = if xv > 0.0 { gv } else { gv * (ov + alpha) };
                    },
                );
                vec![dx]
            }
            Op::Exp => {
                let mut dx = out.clone();
                dx.zip_mut_with(g, |o, &gv| *o *= gv);
                vec![dx]
            }
            Op::Log => {
                let mut dx = x(0).clone();
                dx.zip_mut_with(g, |v, &gv| *v = gv / *v);
                vec![dx]
            }
            Op::Softmax { axis } => {
                // dx = s ∘ (g − Σ_axis(g ∘ s))
                let s = out;
                let gs = ops::mul(g, s)?;
                let sums = gs.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let centered = ops::sub(g, &sums)?;
                vec![ops::mul(s, &centered)?]
            }
            Op::LayerNorm { eps } => {
                let xin = x(0);
                let last = xin.ndim() - 1;
                let n = xin.shape()[last] as f64;
                let mut dx = xin.clone();
                ndarray::Zip::from(dx.lanes_mut(Axis(last)))
                    .and(xin.lanes(Axis(last)))
                    .and(g.lanes(Axis(last)))
                    .for_each(|mut dl, xl, gl| {
                        let mean = xl.sum() / n;
                        let var = xl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let r = 1.0 / (var + eps).sqrt();
                        let gmean = gl.sum() / n;
                        let gdot = xl
                            .iter()
                            .zip(gl.iter())
                            .map(|(&xv, &gv)| gv * (xv - mean) * r)
                            .sum::<f64>()
                            / n;
                        for ((d, &xv), &gv) in dl.iter_mut().zip(xl.iter()).zip(gl.iter()) {
                            let xhat = (xv - mean) * r;
                            *d = r * (gv - gmean - xhat * gdot);
                        }
                    });
                vec![dx]
            }
            Op::Dropout { mask, keep } => vec![ops::dropout_masked(g, mask, *keep)?],
            Op::Mse => {
                let n = x(0).len() as f64;
                let gv = ops::scalar_of(g)?;
                let diff = ops::sub(x(0), x(1))?;
                let da = ops::affine(&diff, 2.0 * gv / n, 0.0);
                let db = ops::affine(&da, -1.0, 0.0);
                vec![da, db]
            }
            Op::Mean => {
                let n = x(0).len() as f64;
                let gv = ops::scalar_of(g)?;
                vec![Arr::from_elem(x(0).raw_dim(), gv / n)]
            }
            Op::Sum => {
                let gv = ops::scalar_of(g)?;
                vec![Arr::from_elem(x(0).raw_dim(), gv)]
            }
        })
    }
}

/// Transpose of the last two axes of a 3-d array (copying).
fn swap_last_two(x: &Arr) -> Arr {
    let mut v = x.view();
    let n = v.ndim();
    v.swap_axes(n - 2, n - 1);
    v.as_standard_layout().into_owned()
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the swept output w.r.t. `t`, if `t` is a tracked node on
    /// a path to that output.
    pub fn get(&self, t: &Tensor) -> Option<&Arr> {
        match t.node {
            Some((gid, nid)) if gid == self.graph => self.grads.get(nid)?.as_ref(),
            _ => None,
        }
    }

    /// Moves the gradient out (avoids a copy when feeding the optimizer).
    pub fn take(&mut self, t: &Tensor) -> Option<Arr> {
        match t.node {
            Some((gid, nid)) if gid == self.graph => self.grads.get_mut(nid)?.take(),
            _ => None,
        }
    }
}
