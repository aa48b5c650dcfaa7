//! Pure forward kernels shared by the graph engine and by finite-difference
//! verification.
//!
//! Every kernel is a deterministic function of its f64 inputs: no hidden
//! state, no threading. The differentiation graph records which kernel
//! produced a node and replays the matching vector-Jacobian product during
//! the backward sweep; the gradient checker instead re-evaluates these same
//! forward functions at perturbed inputs, which keeps the derivative path
//! and the verification path independent.

use ndarray::{concatenate, Axis, Ix2, Slice, Zip};

use crate::error::{Error, Result};

/// Dynamic-dimensional f64 array, the storage type for all tensors.
pub type Arr = ndarray::ArrayD<f64>;

/// Logit gaps larger than this are treated as fully saturated by softmax:
/// the corresponding probability flushes to exactly zero. e^-30 ≈ 9e-14 is
/// below every tolerance used in this crate, and the flush makes masked
/// attention weights exactly zero.
pub const SOFTMAX_SATURATION: f64 = 30.0;

/// 0-dimensional array holding a single scalar.
pub fn scalar(v: f64) -> Arr {
    Arr::from_elem(ndarray::IxDyn(&[]), v)
}

/// Extracts the value of a single-element array.
pub fn scalar_of(x: &Arr) -> Result<f64> {
    if x.len() != 1 {
        return Err(Error::shape("scalar_of", format!("expected 1 element, got {:?}", x.shape())));
    }
    Ok(*x.iter().next().expect("len checked"))
}

/// Shape produced by numpy-style trailing broadcasting, or an error if the
/// shapes are incompatible.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Sums `grad` down to `target` shape, inverting a broadcast.
pub fn reduce_to(grad: &Arr, target: &[usize]) -> Arr {
    let mut cur = grad.clone();
    while cur.ndim() > target.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for (ax, &want) in target.iter().enumerate() {
        if cur.shape()[ax] != want {
            debug_assert_eq!(want, 1, "reduce_to: target must be 1 where shapes differ");
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    cur
}

/// Elementwise binary op with trailing broadcasting.
fn zip_broadcast(
    op: &'static str,
    a: &Arr,
    b: &Arr,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Arr> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let av = a
        .broadcast(shape.as_slice())
        .ok_or_else(|| Error::shape(op, format!("cannot broadcast {:?} to {shape:?}", a.shape())))?;
    let bv = b
        .broadcast(shape.as_slice())
        .ok_or_else(|| Error::shape(op, format!("cannot broadcast {:?} to {shape:?}", b.shape())))?;
    let mut out = Arr::zeros(shape.as_slice());
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

pub fn add(a: &Arr, b: &Arr) -> Result<Arr> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Arr, b: &Arr) -> Result<Arr> {
    zip_broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Arr, b: &Arr) -> Result<Arr> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

/// `y = mul·x + add`, covering negation, scaling, and `1 − x`.
pub fn affine(x: &Arr, mul: f64, add: f64) -> Arr {
    x.mapv(|v| mul * v + add)
}

/// 2-D matrix product.
pub fn matmul(a: &Arr, b: &Arr) -> Result<Arr> {
    let a2 = a
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape("matmul", format!("lhs must be 2-d, got {:?}", a.shape())))?;
    let b2 = b
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape("matmul", format!("rhs must be 2-d, got {:?}", b.shape())))?;
    if a2.ncols() != b2.nrows() {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = ndarray::Array2::<f64>::zeros((a2.nrows(), b2.ncols()));
    ndarray::linalg::general_mat_mul(1.0, &a2, &b2, 0.0, &mut out);
    Ok(out.into_dyn())
}

/// Batched matrix product over the leading axis; `transpose_b` computes
/// `a · bᵀ` per batch item (used for attention scores).
pub fn bmm(a: &Arr, b: &Arr, transpose_b: bool) -> Result<Arr> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape(
            "bmm",
            format!("need matching 3-d inputs, got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (bs, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, bm) = if transpose_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if k != bk {
        return Err(Error::shape(
            "bmm",
            format!("inner dims differ: {:?} x {:?} (transpose_b={transpose_b})", a.shape(), b.shape()),
        ));
    }
    let mut out = ndarray::Array3::<f64>::zeros((bs, n, bm));
    for i in 0..bs {
        let ai = a.index_axis(Axis(0), i);
        let ai = ai.view().into_dimensionality::<Ix2>().expect("3-d slice");
        let bi = b.index_axis(Axis(0), i);
        let bi = bi.view().into_dimensionality::<Ix2>().expect("3-d slice");
        let mut oi = out.index_axis_mut(Axis(0), i);
        if transpose_b {
            ndarray::linalg::general_mat_mul(1.0, &ai, &bi.t(), 0.0, &mut oi);
        } else {
            ndarray::linalg::general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
        }
    }
    Ok(out.into_dyn())
}

pub fn concat(parts: &[&Arr], axis: usize) -> Result<Arr> {
    if parts.is_empty() {
        return Err(Error::contract("concat", "no inputs"));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(axis), &views)
        .map_err(|e| Error::shape("concat", format!("incompatible shapes along axis {axis}: {e}")))
}

pub fn slice(x: &Arr, axis: usize, start: usize, end: usize) -> Result<Arr> {
    if axis >= x.ndim() || start > end || end > x.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
        ));
    }
    Ok(x.slice_axis(Axis(axis), Slice::from(start..end)).to_owned())
}

pub fn reshape(x: &Arr, shape: &[usize]) -> Result<Arr> {
    let n: usize = shape.iter().product();
    if n != x.len() {
        return Err(Error::shape(
            "reshape",
            format!("cannot reshape {:?} into {shape:?}", x.shape()),
        ));
    }
    // Input buffers are standard layout except after transpose; copy if needed.
    let std = x.as_standard_layout().into_owned();
    Ok(std.into_shape_with_order(shape).expect("length checked").into_dyn())
}

/// 2-D transpose (copies into standard layout).
pub fn transpose(x: &Arr) -> Result<Arr> {
    if x.ndim() != 2 {
        return Err(Error::shape("transpose", format!("need 2-d input, got {:?}", x.shape())));
    }
    Ok(x.t().as_standard_layout().into_owned())
}

pub fn sigmoid(x: &Arr) -> Arr {
    x.mapv(|v| {
        // Split form avoids overflow for large |v|.
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

pub fn tanh(x: &Arr) -> Arr {
    x.mapv(f64::tanh)
}

pub fn relu(x: &Arr) -> Arr {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn elu(x: &Arr, alpha: f64) -> Arr {
    x.mapv(|v| if v > 0.0 { v } else { alpha * (v.exp() - 1.0) })
}

pub fn exp(x: &Arr) -> Arr {
    x.mapv(f64::exp)
}

/// Natural log; inputs must be strictly positive.
pub fn log(x: &Arr) -> Result<Arr> {
    if let Some(bad) = x.iter().find(|v| **v <= 0.0) {
        return Err(Error::numeric("log", format!("non-positive input {bad}")));
    }
    Ok(x.mapv(f64::ln))
}

/// Softmax along `axis` with max-subtraction and saturation flush: entries
/// more than [`SOFTMAX_SATURATION`] below the lane max get probability
/// exactly 0, so fully saturated lanes produce exact one-hot vectors.
pub fn softmax_axis(x: &Arr, axis: usize) -> Result<Arr> {
    if axis >= x.ndim() {
        return Err(Error::shape("softmax", format!("axis {axis} of {:?}", x.shape())));
    }
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            let d = *v - m;
            *v = if d < -SOFTMAX_SATURATION { 0.0 } else { d.exp() };
            sum += *v;
        }
        // The max element contributes exp(0)=1, so sum >= 1 always.
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Per-lane normalization over the last axis: `(x − mean) / sqrt(var + eps)`,
/// without an affine transform (apply gain/bias as separate ops if wanted).
pub fn layer_norm(x: &Arr, eps: f64) -> Result<Arr> {
    if x.ndim() == 0 {
        return Err(Error::shape("layer_norm", "scalar input"));
    }
    let last = x.ndim() - 1;
    let n = x.shape()[last] as f64;
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(last)) {
        let mean = lane.sum() / n;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        lane.mapv_inplace(|v| (v - mean) * r);
    }
    Ok(out)
}

/// Inverted-scaling dropout with an explicit {0,1} mask: `x ∘ mask / keep`.
pub fn dropout_masked(x: &Arr, mask: &Arr, keep: f64) -> Result<Arr> {
    if x.shape() != mask.shape() {
        return Err(Error::shape(
            "dropout",
            format!("mask shape {:?} != input {:?}", mask.shape(), x.shape()),
        ));
    }
    let inv = 1.0 / keep;
    let mut out = x.clone();
    Zip::from(&mut out).and(mask).for_each(|o, &m| *o *= m * inv);
    Ok(out)
}

/// Mean squared error over all elements (scalar output).
pub fn mse(pred: &Arr, target: &Arr) -> Result<Arr> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("pred {:?} != target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::contract("mse", "empty input"));
    }
    let n = pred.len() as f64;
    let s = Zip::from(pred).and(target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t));
    Ok(scalar(s / n))
}

/// Mean over all elements (scalar output).
pub fn mean(x: &Arr) -> Result<Arr> {
    if x.is_empty() {
        return Err(Error::contract("mean", "empty input"));
    }
    Ok(scalar(x.sum() / x.len() as f64))
}

/// Sum over all elements (scalar output).
pub fn sum(x: &Arr) -> Result<Arr> {
    Ok(scalar(x.sum()))
}
