//! Central finite-difference verification of analytic gradients.
//!
//! For an op `f` and a fixed random projection `R`, the scalar
//! `s(x) = <f(x), R>` is differentiated two ways: analytically, by seeding
//! the backward sweep with `R`, and numerically, by central differences of
//! pure forward evaluations `(s(x + h·e) − s(x − h·e)) / 2h` per component.
//! The forward evaluations never touch the graph, so the derivative path is
//! verified against an independent oracle.
//!
//! [`standard_op_suite`] enumerates every differentiable op kind in the
//! engine with suitable input distributions (kinked ops are sampled away
//! from their kinks, log away from zero, softmax away from saturation).

use super::graph::{Graph, Tensor};
use super::ops::{self, Arr};
use super::rng::StreamRng;
use crate::error::Result;

type BuildFn = Box<dyn Fn(&Graph, &[Tensor]) -> Result<Tensor>>;
type EvalFn = Box<dyn Fn(&[Arr]) -> Result<Arr>>;
type SampleFn = Box<dyn Fn(&mut StreamRng) -> Vec<Arr>>;

/// One op under test: how to sample inputs, how to attach it to a graph,
/// and how to evaluate it without a graph.
pub struct OpCheck {
    pub name: &'static str,
    pub sample: SampleFn,
    pub build: BuildFn,
    pub eval: EvalFn,
    /// Input slots whose gradients are checked (dropout's mask is an input
    /// but not a differentiated one).
    pub grad_slots: Vec<usize>,
}

/// Worst relative error between analytic and finite-difference gradients at
/// one random point. The error measure is
/// `|a − fd| / max(1, |a|, |fd|)`: relative for large gradients, absolute
/// for small ones.
pub fn check_point(check: &OpCheck, rng: &mut StreamRng, h: f64) -> Result<f64> {
    let inputs = (check.sample)(rng);

    // Forward consistency between graph path and pure path.
    let g = Graph::new();
    let tensors: Vec<Tensor> = inputs.iter().map(|x| g.param(x)).collect();
    let out = (check.build)(&g, &tensors)?;
    let pure = (check.eval)(&inputs)?;
    debug_assert_eq!(out.data(), &pure, "graph and pure forward disagree for {}", check.name);

    // Fixed random projection.
    let mut proj_rng = rng.substream("projection");
    let seed = Arr::from_shape_fn(out.data().raw_dim(), |_| proj_rng.gauss());
    let grads = g.backward_seeded(&out, seed.clone())?;

    let project = |arrs: &[Arr]| -> Result<f64> {
        let o = (check.eval)(arrs)?;
        Ok(o.iter().zip(seed.iter()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    for &slot in &check.grad_slots {
        let analytic = grads.get(&tensors[slot]);
        for flat in 0..inputs[slot].len() {
            let mut plus = inputs.to_vec();
            plus[slot].as_slice_mut().expect("standard layout")[flat] += h;
            let mut minus = inputs.to_vec();
            minus[slot].as_slice_mut().expect("standard layout")[flat] -= h;
            let fd = (project(&plus)? - project(&minus)?) / (2.0 * h);
            let a = analytic
                .map(|g| g.as_slice().expect("standard layout")[flat])
                .unwrap_or(0.0);
            let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn arr(rng: &mut StreamRng, shape: &[usize], f: impl Fn(&mut StreamRng) -> f64) -> Arr {
    Arr::from_shape_fn(ndarray::IxDyn(shape), |_| f(rng))
}

fn gauss(rng: &mut StreamRng, shape: &[usize]) -> Arr {
    arr(rng, shape, StreamRng::gauss)
}

/// Gaussian samples pushed away from zero, for ops with a kink there.
fn gauss_off_kink(rng: &mut StreamRng, shape: &[usize]) -> Arr {
    arr(rng, shape, |r| {
        let v = r.gauss();
        if v.abs() < 0.05 {
            v + 0.1 * if v < 0.0 { -1.0 } else { 1.0 }
        } else {
            v
        }
    })
}

macro_rules! op_check {
    ($name:literal, $slots:expr, $sample:expr, $build:expr, $eval:expr) => {
        OpCheck {
            name: $name,
            sample: Box::new($sample),
            build: Box::new($build),
            eval: Box::new($eval),
            grad_slots: $slots,
        }
    };
}

/// Every differentiable op kind in the engine, with input distributions in
/// each op's well-conditioned region.
pub fn standard_op_suite() -> Vec<OpCheck> {
    vec![
        op_check!(
            "matmul",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[4, 2])],
            |g, t| g.matmul(&t[0], &t[1]),
            |x| ops::matmul(&x[0], &x[1])
        ),
        op_check!(
            "bmm",
            vec![0, 1],
            |r| vec![gauss(r, &[2, 3, 4]), gauss(r, &[2, 4, 2])],
            |g, t| g.bmm(&t[0], &t[1], false),
            |x| ops::bmm(&x[0], &x[1], false)
        ),
        op_check!(
            "bmm_transpose_b",
            vec![0, 1],
            |r| vec![gauss(r, &[2, 3, 4]), gauss(r, &[2, 5, 4])],
            |g, t| g.bmm(&t[0], &t[1], true),
            |x| ops::bmm(&x[0], &x[1], true)
        ),
        op_check!(
            "add",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            |g, t| g.add(&t[0], &t[1]),
            |x| ops::add(&x[0], &x[1])
        ),
        op_check!(
            "add_broadcast_bias",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[4])],
            |g, t| g.add(&t[0], &t[1]),
            |x| ops::add(&x[0], &x[1])
        ),
        op_check!(
            "add_broadcast_leading",
            vec![0, 1],
            |r| vec![gauss(r, &[2, 3, 3]), gauss(r, &[3, 3])],
            |g, t| g.add(&t[0], &t[1]),
            |x| ops::add(&x[0], &x[1])
        ),
        op_check!(
            "sub",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            |g, t| g.sub(&t[0], &t[1]),
            |x| ops::sub(&x[0], &x[1])
        ),
        op_check!(
            "mul",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            |g, t| g.mul(&t[0], &t[1]),
            |x| ops::mul(&x[0], &x[1])
        ),
        op_check!(
            "mul_broadcast_column",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 1])],
            |g, t| g.mul(&t[0], &t[1]),
            |x| ops::mul(&x[0], &x[1])
        ),
        op_check!(
            "affine",
            vec![0],
            |r| vec![gauss(r, &[3, 4])],
            |g, t| g.affine(&t[0], 1.7, -0.3),
            |x| Ok(ops::affine(&x[0], 1.7, -0.3))
        ),
        op_check!(
            "concat",
            vec![0, 1, 2],
            |r| vec![gauss(r, &[2, 3]), gauss(r, &[2, 2]), gauss(r, &[2, 4])],
            |g, t| g.concat(&[&t[0], &t[1], &t[2]], 1),
            |x| ops::concat(&[&x[0], &x[1], &x[2]], 1)
        ),
        op_check!(
            "slice",
            vec![0],
            |r| vec![gauss(r, &[3, 6])],
            |g, t| g.slice(&t[0], 1, 1, 5),
            |x| ops::slice(&x[0], 1, 1, 5)
        ),
        op_check!(
            "reshape",
            vec![0],
            |r| vec![gauss(r, &[2, 6])],
            |g, t| g.reshape(&t[0], &[3, 4]),
            |x| ops::reshape(&x[0], &[3, 4])
        ),
        op_check!(
            "transpose",
            vec![0],
            |r| vec![gauss(r, &[3, 4])],
            |g, t| g.transpose(&t[0]),
            |x| ops::transpose(&x[0])
        ),
        op_check!(
            "sigmoid",
            vec![0],
            |r| vec![gauss(r, &[3, 3])],
            |g, t| g.sigmoid(&t[0]),
            |x| Ok(ops::sigmoid(&x[0]))
        ),
        op_check!(
            "tanh",
            vec![0],
            |r| vec![gauss(r, &[3, 3])],
            |g, t| g.tanh(&t[0]),
            |x| Ok(ops::tanh(&x[0]))
        ),
        op_check!(
            "relu",
            vec![0],
            |r| vec![gauss_off_kink(r, &[3, 4])],
            |g, t| g.relu(&t[0]),
            |x| Ok(ops::relu(&x[0]))
        ),
        op_check!(
            "elu",
            vec![0],
            |r| vec![gauss_off_kink(r, &[3, 4])],
            |g, t| g.elu(&t[0], 1.3),
            |x| Ok(ops::elu(&x[0], 1.3))
        ),
        op_check!(
            "exp",
            vec![0],
            |r| vec![gauss(r, &[3, 3])],
            |g, t| g.exp(&t[0]),
            |x| Ok(ops::exp(&x[0]))
        ),
        op_check!(
            "log",
            vec![0],
            |r| vec![arr(r, &[3, 3], |r| r.gauss().abs() + 0.5)],
            |g, t| g.log(&t[0]),
            |x| ops::log(&x[0])
        ),
        op_check!(
            "softmax",
            vec![0],
            |r| vec![gauss(r, &[3, 5])],
            |g, t| g.softmax(&t[0], 1),
            |x| ops::softmax_axis(&x[0], 1)
        ),
        op_check!(
            "layer_norm",
            vec![0],
            |r| vec![gauss(r, &[4, 6])],
            |g, t| g.layer_norm(&t[0], 1e-5),
            |x| ops::layer_norm(&x[0], 1e-5)
        ),
        {
            // Dropout gets a fixed mask per suite instantiation; the mask is
            // an input slot but not a differentiated one.
            let p = 0.3;
            op_check!(
                "dropout",
                vec![0],
                move |r| {
                    let x = gauss(r, &[4, 5]);
                    let mask = arr(r, &[4, 5], |r| if r.bernoulli(1.0 - p) { 1.0 } else { 0.0 });
                    vec![x, mask]
                },
                move |g, t| g.dropout_masked(&t[0], t[1].data().clone(), p),
                move |x| ops::dropout_masked(&x[0], &x[1], 1.0 - p)
            )
        },
        op_check!(
            "mse_loss",
            vec![0, 1],
            |r| vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            |g, t| g.mse(&t[0], &t[1]),
            |x| ops::mse(&x[0], &x[1])
        ),
        op_check!(
            "mean",
            vec![0],
            |r| vec![gauss(r, &[3, 5])],
            |g, t| g.mean(&t[0]),
            |x| ops::mean(&x[0])
        ),
        op_check!(
            "sum",
            vec![0],
            |r| vec![gauss(r, &[3, 5])],
            |g, t| g.sum(&t[0]),
            |x| ops::sum(&x[0])
        ),
    ]
}
