//! Multi-head scaled dot-product attention with learned relative-position
//! logit biases and mandatory-when-encoding causal masking.
//!
//! Heads are realized by column-slicing the query/key/value projections,
//! so a single set of `[d_h, d_h]` weight matrices serves any head count
//! that divides `d_h`. The relative-position bias is a learned table with
//! one row per head and one column per clipped signed distance in
//! `-l_max..=l_max`; it is gathered into a `[T, T]` logit matrix through a
//! constant one-hot selector so the gather stays differentiable.
//!
//! Masked logits are offset by `-1e30`, which the softmax's saturation
//! flush turns into exactly zero attention weight — causality is bitwise,
//! not approximate.

use crate::autodiff::{Arr, Binder, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Logit offset that saturates the softmax to an exact zero weight.
pub const MASK_OFF: f64 = -1e30;

/// Weights of one attention instance.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    /// Relative-position logit bias, `[heads, 2*l_max + 1]`.
    pub bias_table: ParamId,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_h: usize,
        heads: usize,
        l_max: usize,
    ) -> Self {
        AttentionParams {
            wq: store.add_glorot(&format!("{prefix}/wq"), d_h, d_h),
            wk: store.add_glorot(&format!("{prefix}/wk"), d_h, d_h),
            wv: store.add_glorot(&format!("{prefix}/wv"), d_h, d_h),
            wo: store.add_glorot(&format!("{prefix}/wo"), d_h, d_h),
            bo: store.add_zeros(&format!("{prefix}/bo"), &[d_h]),
            bias_table: store.add_zeros(&format!("{prefix}/bias_table"), &[heads, 2 * l_max + 1]),
        }
    }
}

/// One-hot gather matrix `[2*l_max+1, T*T]`: column `i*T + j` selects the
/// bias bucket for clipped relative distance `j - i`.
pub(crate) fn rel_pos_selector(t_len: usize, l_max: usize) -> Arr {
    let buckets = 2 * l_max + 1;
    let mut sel = Arr::zeros(ndarray::IxDyn(&[buckets, t_len * t_len]));
    for i in 0..t_len {
        for j in 0..t_len {
            let d = (j as i64 - i as i64).clamp(-(l_max as i64), l_max as i64);
            let bucket = (d + l_max as i64) as usize;
            sel[[bucket, i * t_len + j]] = 1.0;
        }
    }
    sel
}

/// Additive `[T, T]` logit mask: `MASK_OFF` above the diagonal when
/// `causal`, and on every column whose step is padding.
pub(crate) fn logit_mask(t_len: usize, causal: bool, mask: &[f64]) -> Arr {
    let mut m = Arr::zeros(ndarray::IxDyn(&[t_len, t_len]));
    for i in 0..t_len {
        for j in 0..t_len {
            if (causal && j > i) || mask[j] == 0.0 {
                m[[i, j]] = MASK_OFF;
            }
        }
    }
    m
}

/// Multi-head attention over already-encoded streams: `q_in`, `k_in`,
/// `v_in` are `[T, d_h]`. `step_mask` marks valid steps (padding excluded
/// from the keys). Returns `[T, d_h]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &Graph,
    binder: &mut Binder,
    store: &ParamStore,
    p: &AttentionParams,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    heads: usize,
    l_max: usize,
    causal: bool,
    step_mask: &[f64],
) -> Result<Tensor> {
    let t_len = q_in.shape()[0];
    let d_h = q_in.shape()[1];
    if heads == 0 || !d_h.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "attention width {d_h} is not divisible into {heads} heads"
        )));
    }
    if step_mask.len() != t_len {
        return Err(Error::shape("attention", "step mask length != sequence length"));
    }
    let d_head = d_h / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = g.matmul(q_in, &binder.get(store, p.wq))?;
    let k = g.matmul(k_in, &binder.get(store, p.wk))?;
    let v = g.matmul(v_in, &binder.get(store, p.wv))?;
    let table = binder.get(store, p.bias_table);
    let selector = Tensor::constant(rel_pos_selector(t_len, l_max));
    let mask = Tensor::constant(logit_mask(t_len, causal, step_mask));

    let mut head_outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let (lo, hi) = (m * d_head, (m + 1) * d_head);
        let qm = g.slice(&q, 1, lo, hi)?;
        let km = g.slice(&k, 1, lo, hi)?;
        let vm = g.slice(&v, 1, lo, hi)?;
        let scores = g.affine(&g.matmul(&qm, &g.transpose(&km)?)?, scale, 0.0)?;
        let bias_row = g.slice(&table, 0, m, m + 1)?;
        let bias = g.reshape(&g.matmul(&bias_row, &selector)?, &[t_len, t_len])?;
        let logits = g.add(&g.add(&scores, &bias)?, &mask)?;
        let attn = g.softmax(&logits, 1)?;
        head_outs.push(g.matmul(&attn, &vm)?);
    }
    let outs: Vec<&Tensor> = head_outs.iter().collect();
    let cat = g.concat(&outs, 1)?;
    g.add(&g.matmul(&cat, &binder.get(store, p.wo))?, &binder.get(store, p.bo))
}
