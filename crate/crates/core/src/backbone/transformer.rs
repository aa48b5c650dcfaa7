//! Multi-input transformer encoder.
//!
//! Three sub-encoders — one per history stream (outcomes, covariates,
//! treatments) — exchange information through attention:
//!
//! 1. each stream is linearly embedded to width `d_h`;
//! 2. every block applies, per stream, causal multi-head self-attention
//!    with a residual connection, then cross-attention that sums attention
//!    over the other two streams (residual again), then a feed-forward
//!    stack `LayerNorm ∘ Dropout ∘ Linear ∘ Dropout ∘ ReLU ∘ Linear`
//!    wrapped in a residual connection;
//! 3. the final representation is `ELU ∘ Linear ∘ Dropout` of the average
//!    of the three streams.
//!
//! Every attention is causally masked: an unmasked encoder would condition
//! each step on future confounders, which the estimator's conditioning set
//! forbids.

use crate::autodiff::{Binder, Graph, ParamId, ParamStore, StreamRng, Tensor};
use crate::error::Result;

use super::attention::{multi_head_attention, AttentionParams};

/// Per-stream feed-forward + layer-norm weights.
#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl FeedForwardParams {
    fn register(store: &mut ParamStore, prefix: &str, d_h: usize) -> Self {
        let hidden = 2 * d_h;
        FeedForwardParams {
            w1: store.add_glorot(&format!("{prefix}/w1"), d_h, hidden),
            b1: store.add_zeros(&format!("{prefix}/b1"), &[hidden]),
            w2: store.add_glorot(&format!("{prefix}/w2"), hidden, d_h),
            b2: store.add_zeros(&format!("{prefix}/b2"), &[d_h]),
            ln_gain: store.add_const(&format!("{prefix}/ln_gain"), &[d_h], 1.0),
            ln_bias: store.add_zeros(&format!("{prefix}/ln_bias"), &[d_h]),
        }
    }
}

/// One block's weights for one stream.
#[derive(Debug, Clone)]
pub struct StreamBlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ff: FeedForwardParams,
}

/// All transformer weights: embeddings per stream, `blocks × streams`
/// block weights, and the shared output head.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub emb_w: [ParamId; 3],
    pub emb_b: [ParamId; 3],
    pub blocks: Vec<[StreamBlockParams; 3]>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl TransformerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        stream_dims: [usize; 3],
        d_h: usize,
        d_z: usize,
        n_blocks: usize,
        heads: usize,
        l_max: usize,
    ) -> Self {
        let emb_w = std::array::from_fn(|k| {
            store.add_glorot(&format!("{prefix}/s{k}/emb_w"), stream_dims[k], d_h)
        });
        let emb_b = std::array::from_fn(|k| store.add_zeros(&format!("{prefix}/s{k}/emb_b"), &[d_h]));
        let blocks = (0..n_blocks)
            .map(|j| {
                std::array::from_fn(|k| StreamBlockParams {
                    self_attn: AttentionParams::register(
                        store,
                        &format!("{prefix}/b{j}/s{k}/self"),
                        d_h,
                        heads,
                        l_max,
                    ),
                    cross_attn: AttentionParams::register(
                        store,
                        &format!("{prefix}/b{j}/s{k}/cross"),
                        d_h,
                        heads,
                        l_max,
                    ),
                    ff: FeedForwardParams::register(store, &format!("{prefix}/b{j}/s{k}/ff"), d_h),
                })
            })
            .collect();
        TransformerParams {
            emb_w,
            emb_b,
            blocks,
            w_out: store.add_glorot(&format!("{prefix}/out_w"), d_h, d_z),
            b_out: store.add_zeros(&format!("{prefix}/out_b"), &[d_z]),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn feed_forward(
    g: &Graph,
    binder: &mut Binder,
    store: &ParamStore,
    ff: &FeedForwardParams,
    x: &Tensor,
    dropout: f64,
    train: bool,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let hidden = g.relu(&g.add(&g.matmul(x, &binder.get(store, ff.w1))?, &binder.get(store, ff.b1))?)?;
    let hidden = g.dropout(&hidden, dropout, train, rng)?;
    let inner = g.add(&g.matmul(&hidden, &binder.get(store, ff.w2))?, &binder.get(store, ff.b2))?;
    let inner = g.dropout(&inner, dropout, train, rng)?;
    let normed = g.layer_norm(&g.add(x, &inner)?, 1e-6)?;
    g.add(&g.mul(&normed, &binder.get(store, ff.ln_gain))?, &binder.get(store, ff.ln_bias))
}

/// Full forward pass. `streams` are the embedded-input sources
/// `[outcomes, covariates, treatments]`, each `[T, d_k]`; returns
/// `[T, d_z]`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_forward(
    g: &Graph,
    binder: &mut Binder,
    store: &ParamStore,
    p: &TransformerParams,
    streams: [&Tensor; 3],
    mask: &[f64],
    heads: usize,
    l_max: usize,
    dropout: f64,
    train: bool,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let mut xs: Vec<Tensor> = Vec::with_capacity(3);
    for (k, stream) in streams.iter().enumerate() {
        xs.push(g.add(
            &g.matmul(stream, &binder.get(store, p.emb_w[k]))?,
            &binder.get(store, p.emb_b[k]),
        )?);
    }
    for block in &p.blocks {
        // Per-stream causal self-attention, residual.
        let mut selfed = Vec::with_capacity(3);
        for k in 0..3 {
            let att = multi_head_attention(
                g,
                binder,
                store,
                &block[k].self_attn,
                &xs[k],
                &xs[k],
                &xs[k],
                heads,
                l_max,
                true,
                mask,
            )?;
            selfed.push(g.add(&xs[k], &att)?);
        }
        // Cross-attention: each stream queries the other two and sums.
        let mut crossed = Vec::with_capacity(3);
        for k in 0..3 {
            let mut acc = selfed[k].clone();
            for other in 0..3 {
                if other == k {
                    continue;
                }
                let att = multi_head_attention(
                    g,
                    binder,
                    store,
                    &block[k].cross_attn,
                    &selfed[k],
                    &selfed[other],
                    &selfed[other],
                    heads,
                    l_max,
                    true,
                    mask,
                )?;
                acc = g.add(&acc, &att)?;
            }
            crossed.push(acc);
        }
        // Feed-forward stack with residual, per stream.
        let mut next = Vec::with_capacity(3);
        for (k, x) in crossed.iter().enumerate() {
            next.push(feed_forward(g, binder, store, &block[k].ff, x, dropout, train, rng)?);
        }
        xs = next;
    }
    let sum = g.add(&g.add(&xs[0], &xs[1])?, &xs[2])?;
    let avg = g.affine(&sum, 1.0 / 3.0, 0.0)?;
    let dropped = g.dropout(&avg, dropout, train, rng)?;
    let z = g.add(&g.matmul(&dropped, &binder.get(store, p.w_out))?, &binder.get(store, p.b_out))?;
    g.elu(&z, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arr;
    use ndarray::IxDyn;

    const DIMS: [usize; 3] = [2, 3, 2];
    const D_H: usize = 8;
    const D_Z: usize = 4;
    const HEADS: usize = 2;
    const L_MAX: usize = 4;

    fn streams(t_len: usize, seed: u64) -> [Arr; 3] {
        let mut rng = StreamRng::new(seed, "tf-test");
        std::array::from_fn(|k| Arr::from_shape_fn(IxDyn(&[t_len, DIMS[k]]), |_| rng.gauss()))
    }

    fn forward(store: &ParamStore, p: &TransformerParams, inputs: &[Arr; 3], mask: &[f64]) -> Arr {
        let g = Graph::new();
        let mut binder = Binder::new(&g, store);
        let ts: [Tensor; 3] = std::array::from_fn(|k| Tensor::constant(inputs[k].clone()));
        let mut rng = StreamRng::new(0, "unused");
        transformer_forward(
            &g,
            &mut binder,
            store,
            p,
            [&ts[0], &ts[1], &ts[2]],
            mask,
            HEADS,
            L_MAX,
            0.0,
            false,
            &mut rng,
        )
        .unwrap()
        .data()
        .clone()
    }

    /// Plain-ndarray reference for embeddings + output head (J = 0 path).
    fn expected_j0(store: &ParamStore, p: &TransformerParams, inputs: &[Arr; 3]) -> Arr {
        let t_len = inputs[0].shape()[0];
        let mut avg = Arr::zeros(IxDyn(&[t_len, D_H]));
        for k in 0..3 {
            let w = store.get(p.emb_w[k]);
            let b = store.get(p.emb_b[k]);
            for t in 0..t_len {
                for c in 0..D_H {
                    let mut v = b[[c]];
                    for d in 0..DIMS[k] {
                        v += inputs[k][[t, d]] * w[[d, c]];
                    }
                    avg[[t, c]] += v / 3.0;
                }
            }
        }
        let w_out = store.get(p.w_out);
        let b_out = store.get(p.b_out);
        let mut z = Arr::zeros(IxDyn(&[t_len, D_Z]));
        for t in 0..t_len {
            for c in 0..D_Z {
                let mut v = b_out[[c]];
                for d in 0..D_H {
                    v += avg[[t, d]] * w_out[[d, c]];
                }
                z[[t, c]] = if v > 0.0 { v } else { v.exp_m1() };
            }
        }
        z
    }

    #[test]
    fn zero_blocks_reduce_to_the_output_of_averaged_embeddings() {
        let mut store = ParamStore::new(5);
        let p = TransformerParams::register(&mut store, "tf", DIMS, D_H, D_Z, 0, HEADS, L_MAX);
        let inputs = streams(5, 1);
        let z = forward(&store, &p, &inputs, &[1.0; 5]);
        let want = expected_j0(&store, &p, &inputs);
        for (a, b) in z.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_valued_attention_leaves_only_residual_and_feed_forward() {
        let mut store = ParamStore::new(6);
        let p = TransformerParams::register(&mut store, "tf", DIMS, D_H, D_Z, 1, HEADS, L_MAX);
        // Kill every attention output: zero value and output projections.
        for k in 0..3 {
            for attn in [&p.blocks[0][k].self_attn, &p.blocks[0][k].cross_attn] {
                store.set(attn.wv, Arr::zeros(IxDyn(&[D_H, D_H]))).unwrap();
                store.set(attn.wo, Arr::zeros(IxDyn(&[D_H, D_H]))).unwrap();
            }
        }
        let inputs = streams(4, 2);
        let z = forward(&store, &p, &inputs, &[1.0; 4]);

        // Reference: embeddings -> per-stream feed-forward with residual ->
        // averaged output head, with attention contributing nothing.
        let g = Graph::new();
        let mut binder = Binder::new(&g, &store);
        let mut rng = StreamRng::new(0, "unused");
        let mut xs = Vec::new();
        for (k, input) in inputs.iter().enumerate() {
            let x = Tensor::constant(input.clone());
            let emb = g
                .add(&g.matmul(&x, &binder.get(&store, p.emb_w[k])).unwrap(), &binder.get(&store, p.emb_b[k]))
                .unwrap();
            xs.push(
                feed_forward(&g, &mut binder, &store, &p.blocks[0][k].ff, &emb, 0.0, false, &mut rng)
                    .unwrap(),
            );
        }
        let sum = g.add(&g.add(&xs[0], &xs[1]).unwrap(), &xs[2]).unwrap();
        let avg = g.affine(&sum, 1.0 / 3.0, 0.0).unwrap();
        let zz =
            g.add(&g.matmul(&avg, &binder.get(&store, p.w_out)).unwrap(), &binder.get(&store, p.b_out)).unwrap();
        let want = g.elu(&zz, 1.0).unwrap();
        for (a, b) in z.iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn future_perturbations_leave_past_representations_unchanged() {
        let mut store = ParamStore::new(7);
        let p = TransformerParams::register(&mut store, "tf", DIMS, D_H, D_Z, 2, HEADS, L_MAX);
        let base = streams(6, 3);
        let mut bumped = base.clone();
        for k in 0..3 {
            for d in 0..DIMS[k] {
                bumped[k][[5, d]] += 7.5;
            }
        }
        let za = forward(&store, &p, &base, &[1.0; 6]);
        let zb = forward(&store, &p, &bumped, &[1.0; 6]);
        for t in 0..5 {
            for c in 0..D_Z {
                let diff = (za[[t, c]] - zb[[t, c]]).abs();
                assert!(diff < 1e-12, "step {t} dim {c} moved by {diff}");
            }
        }
        assert!((0..D_Z).any(|c| za[[5, c]] != zb[[5, c]]));
    }

    #[test]
    fn padded_steps_do_not_disturb_valid_prefixes() {
        let mut store = ParamStore::new(8);
        let p = TransformerParams::register(&mut store, "tf", DIMS, D_H, D_Z, 1, HEADS, L_MAX);
        let valid = streams(4, 4);
        let padded: [Arr; 3] = std::array::from_fn(|k| {
            let mut a = Arr::from_elem(IxDyn(&[6, DIMS[k]]), 42.0); // garbage rows
            for t in 0..4 {
                for d in 0..DIMS[k] {
                    a[[t, d]] = valid[k][[t, d]];
                }
            }
            a
        });
        let z_valid = forward(&store, &p, &valid, &[1.0; 4]);
        let z_padded = forward(&store, &p, &padded, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        for t in 0..4 {
            for c in 0..D_Z {
                assert_eq!(z_valid[[t, c]], z_padded[[t, c]]);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut store = ParamStore::new(9);
        let p = TransformerParams::register(&mut store, "tf", DIMS, D_H, D_Z, 1, HEADS, L_MAX);
        let inputs = streams(3, 5);
        let loss_of = |store: &ParamStore| -> f64 {
            let g = Graph::new();
            let mut binder = Binder::new(&g, store);
            let ts: [Tensor; 3] = std::array::from_fn(|k| Tensor::constant(inputs[k].clone()));
            let mut rng = StreamRng::new(0, "unused");
            let z = transformer_forward(
                &g,
                &mut binder,
                store,
                &p,
                [&ts[0], &ts[1], &ts[2]],
                &[1.0; 3],
                HEADS,
                L_MAX,
                0.0,
                false,
                &mut rng,
            )
            .unwrap();
            g.mean(&g.mul(&z, &z).unwrap()).unwrap().value().unwrap()
        };
        // Analytic gradient of mean(z^2) for a handful of parameters.
        let g = Graph::new();
        let mut binder = Binder::new(&g, &store);
        let ts: [Tensor; 3] = std::array::from_fn(|k| Tensor::constant(inputs[k].clone()));
        let mut rng = StreamRng::new(0, "unused");
        let z = transformer_forward(
            &g,
            &mut binder,
            &store,
            &p,
            [&ts[0], &ts[1], &ts[2]],
            &[1.0; 3],
            HEADS,
            L_MAX,
            0.0,
            false,
            &mut rng,
        )
        .unwrap();
        let loss = g.mean(&g.mul(&z, &z).unwrap()).unwrap();
        let grads = g.backward(&loss).unwrap();
        let slots = binder.slots().to_vec();
        let picks = [
            (p.emb_w[0], [0usize, 0usize]),
            (p.blocks[0][1].self_attn.wq, [2, 3]),
            (p.blocks[0][2].cross_attn.wv, [1, 1]),
            (p.blocks[0][0].ff.w1, [3, 5]),
            (p.w_out, [2, 1]),
        ];
        let h = 1e-5;
        for (id, ix) in picks {
            let leaf = slots[id.index()].as_ref().expect("param touched in forward");
            let analytic = grads.get(leaf).expect("gradient present")[ix];
            let orig = store.get(id).clone();
            let mut up = orig.clone();
            up[ix] += h;
            let mut down = orig.clone();
            down[ix] -= h;
            store.set(id, up).unwrap();
            let f_up = loss_of(&store);
            store.set(id, down).unwrap();
            let f_down = loss_of(&store);
            store.set(id, orig).unwrap();
            let fd = (f_up - f_down) / (2.0 * h);
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            assert!(err < 1e-6, "param {:?} idx {ix:?}: analytic {analytic} fd {fd}", id);
        }
    }
}
