//! LSTM sequence encoder.
//!
//! The three history streams are concatenated per step into one input row;
//! a single-layer LSTM with forget-gate bias 1.0 runs over the valid steps
//! and a linear projection of each hidden state yields the per-step
//! representation. Steps whose mask is zero produce no state update (the
//! mask is data, not a graph input, so masking costs no graph nodes).

use crate::autodiff::{Arr, Binder, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Weights of one LSTM encoder: fused gate projections in i/f/g/o order,
/// plus the hidden-to-representation output map.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub d_h: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        d_z: usize,
    ) -> Self {
        let w_ih = store.add_glorot(&format!("{prefix}/w_ih"), d_in, 4 * d_h);
        let w_hh = store.add_glorot(&format!("{prefix}/w_hh"), d_h, 4 * d_h);
        let b = store.add_zeros(&format!("{prefix}/b"), &[4 * d_h]);
        // Forget-gate bias starts at 1.0 so early training does not erase
        // state faster than gradients can correct.
        for f in d_h..2 * d_h {
            store.get_mut(b)[[f]] = 1.0;
        }
        let w_z = store.add_glorot(&format!("{prefix}/w_z"), d_h, d_z);
        let b_z = store.add_zeros(&format!("{prefix}/b_z"), &[d_z]);
        LstmParams { w_ih, w_hh, b, w_z, b_z, d_h }
    }
}

/// Runs the recurrence over `input` (`[T, d_in]`) and returns the per-step
/// representations `[T, d_z]`. `mask[t] == 0` freezes the state at step t.
pub fn lstm_forward(
    g: &Graph,
    binder: &mut Binder,
    store: &ParamStore,
    p: &LstmParams,
    input: &Tensor,
    mask: &[f64],
) -> Result<Tensor> {
    let t_len = input.shape()[0];
    if t_len == 0 {
        return Err(Error::contract("lstm", "empty history"));
    }
    if mask.len() != t_len {
        return Err(Error::shape("lstm", "mask length != sequence length"));
    }
    let d_h = p.d_h;
    let w_ih = binder.get(store, p.w_ih);
    let w_hh = binder.get(store, p.w_hh);
    let b = binder.get(store, p.b);
    let w_z = binder.get(store, p.w_z);
    let b_z = binder.get(store, p.b_z);

    let mut h = Tensor::constant(Arr::zeros(ndarray::IxDyn(&[1, d_h])));
    let mut c = h.clone();
    let mut z_rows = Vec::with_capacity(t_len);
    for (t, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            let x_t = g.slice(input, 0, t, t + 1)?;
            let pre = g.add(&g.add(&g.matmul(&x_t, &w_ih)?, &g.matmul(&h, &w_hh)?)?, &b)?;
            let i_g = g.sigmoid(&g.slice(&pre, 1, 0, d_h)?)?;
            let f_g = g.sigmoid(&g.slice(&pre, 1, d_h, 2 * d_h)?)?;
            let g_g = g.tanh(&g.slice(&pre, 1, 2 * d_h, 3 * d_h)?)?;
            let o_g = g.sigmoid(&g.slice(&pre, 1, 3 * d_h, 4 * d_h)?)?;
            c = g.add(&g.mul(&f_g, &c)?, &g.mul(&i_g, &g_g)?)?;
            h = g.mul(&o_g, &g.tanh(&c)?)?;
        }
        z_rows.push(g.add(&g.matmul(&h, &w_z)?, &b_z)?);
    }
    let rows: Vec<&Tensor> = z_rows.iter().collect();
    g.concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn run(
        store: &ParamStore,
        p: &LstmParams,
        input: Arr,
        mask: &[f64],
    ) -> Arr {
        let g = Graph::new();
        let mut binder = Binder::new(&g, store);
        lstm_forward(&g, &mut binder, store, p, &Tensor::constant(input), mask)
            .unwrap()
            .data()
            .clone()
    }

    #[test]
    fn zero_weights_produce_zero_representations() {
        let mut store = ParamStore::new(0);
        let p = LstmParams::register(&mut store, "lstm", 3, 4, 2);
        for id in [p.w_ih, p.w_hh, p.b, p.w_z, p.b_z] {
            let zero = Arr::zeros(store.get(id).raw_dim());
            store.set(id, zero).unwrap();
        }
        let mut rng = crate::autodiff::StreamRng::new(1, "lstm-zero");
        let input = Arr::from_shape_fn(IxDyn(&[5, 3]), |_| rng.gauss());
        let z = run(&store, &p, input, &[1.0; 5]);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_computed_gates() {
        let mut store = ParamStore::new(0);
        let p = LstmParams::register(&mut store, "lstm", 1, 1, 1);
        let (wi, wf, wg, wo) = (0.3, -0.2, 0.5, 0.7);
        let (bi, bf, bg, bo) = (0.1, 1.0, -0.3, 0.2);
        store
            .set(p.w_ih, Arr::from_shape_vec(IxDyn(&[1, 4]), vec![wi, wf, wg, wo]).unwrap())
            .unwrap();
        store
            .set(p.w_hh, Arr::from_shape_vec(IxDyn(&[1, 4]), vec![0.4, -0.6, 0.2, 0.9]).unwrap())
            .unwrap();
        store.set(p.b, Arr::from_shape_vec(IxDyn(&[4]), vec![bi, bf, bg, bo]).unwrap()).unwrap();
        store.set(p.w_z, Arr::from_shape_vec(IxDyn(&[1, 1]), vec![1.2]).unwrap()).unwrap();
        store.set(p.b_z, Arr::from_shape_vec(IxDyn(&[1]), vec![-0.05]).unwrap()).unwrap();
        let x = 0.8;
        let z = run(&store, &p, Arr::from_shape_vec(IxDyn(&[1, 1]), vec![x]).unwrap(), &[1.0]);
        // Hand recurrence with h0 = c0 = 0.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(wi * x + bi);
        let gg = (wg * x + bg).tanh();
        let o = sig(wo * x + bo);
        let c = i * gg;
        let h = o * c.tanh();
        let want = 1.2 * h - 0.05;
        assert!((z[[0, 0]] - want).abs() < 1e-12, "{} vs {want}", z[[0, 0]]);
    }

    #[test]
    fn future_inputs_leave_earlier_representations_bit_identical() {
        let mut store = ParamStore::new(7);
        let p = LstmParams::register(&mut store, "lstm", 2, 3, 2);
        let mut rng = crate::autodiff::StreamRng::new(2, "lstm-causal");
        let base = Arr::from_shape_fn(IxDyn(&[6, 2]), |_| rng.gauss());
        let mut bumped = base.clone();
        bumped[[4, 0]] += 5.0;
        bumped[[5, 1]] -= 3.0;
        let za = run(&store, &p, base, &[1.0; 6]);
        let zb = run(&store, &p, bumped, &[1.0; 6]);
        for t in 0..4 {
            for cdim in 0..2 {
                assert_eq!(za[[t, cdim]], zb[[t, cdim]]);
            }
        }
        assert!((0..2).any(|cdim| za[[4, cdim]] != zb[[4, cdim]]));
    }

    #[test]
    fn masked_steps_freeze_the_state() {
        let mut store = ParamStore::new(9);
        let p = LstmParams::register(&mut store, "lstm", 2, 3, 2);
        let mut rng = crate::autodiff::StreamRng::new(3, "lstm-mask");
        let valid = Arr::from_shape_fn(IxDyn(&[4, 2]), |_| rng.gauss());
        // Right-pad with garbage rows that the mask must neutralize.
        let mut padded = Arr::from_elem(IxDyn(&[6, 2]), 99.0);
        for t in 0..4 {
            for c in 0..2 {
                padded[[t, c]] = valid[[t, c]];
            }
        }
        let z_valid = run(&store, &p, valid, &[1.0; 4]);
        let z_padded = run(&store, &p, padded, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        for t in 0..4 {
            for c in 0..2 {
                assert_eq!(z_valid[[t, c]], z_padded[[t, c]]);
            }
        }
        // Frozen state means the padded rows repeat step 3's representation.
        for t in 4..6 {
            for c in 0..2 {
                assert_eq!(z_padded[[t, c]], z_padded[[3, c]]);
            }
        }
    }

    #[test]
    fn empty_history_is_rejected() {
        let mut store = ParamStore::new(0);
        let p = LstmParams::register(&mut store, "lstm", 2, 3, 2);
        let g = Graph::new();
        let mut binder = Binder::new(&g, &store);
        let empty = Tensor::constant(Arr::zeros(IxDyn(&[0, 2])));
        assert!(lstm_forward(&g, &mut binder, &store, &p, &empty, &[]).is_err());
    }
}
