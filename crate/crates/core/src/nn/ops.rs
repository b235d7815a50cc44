//! Differentiable building blocks over the tape: MLP, GRU cell, masked
//! softmax, scaled dot-product attention, and the residual self-attention
//! block used for interaction aggregation.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};

/// One affine layer: `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Hidden vectors for a set of agents over a step range: one `agents x dim`
/// node per step.
#[derive(Debug, Clone)]
pub struct HiddenSeq {
    pub steps: Vec<Var>,
    pub n_agents: usize,
    pub dim: usize,
}

/// Affine + ReLU for every hidden layer, final layer affine.
pub fn mlp_forward(t: &mut Tape, x: Var, layers: &[LayerParams]) -> Result<Var> {
    assert!(!layers.is_empty());
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let w = t.param(layer.w);
        let b = t.param(layer.b);
        let (hin, win, wout, bout) = {
            let hv = t.value(h);
            let wv = t.value(w);
            let bv = t.value(b);
            (hv.ncols(), wv.nrows(), wv.ncols(), bv.ncols())
        };
        if hin != win || wout != bout {
            return Err(Error::ShapeMismatch(format!(
                "mlp layer {i}: input width {hin} vs weight {win}x{wout}, bias width {bout}"
            )));
        }
        let z = t.matmul(h, w);
        let z = t.add_row(z, b);
        h = if i + 1 < layers.len() { t.relu(z) } else { z };
    }
    Ok(h)
}

/// Gated recurrent cell parameters, row-vector convention: inputs are
/// `batch x d_in`, hidden states `batch x d`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
}

impl GruParams {
    pub fn register<R: rand::Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruParams {
            wz: store.add_glorot(&format!("{prefix}.wz"), d_in, d, rng)?,
            uz: store.add_glorot(&format!("{prefix}.uz"), d, d, rng)?,
            bz: store.add_zeros(&format!("{prefix}.bz"), 1, d)?,
            wr: store.add_glorot(&format!("{prefix}.wr"), d_in, d, rng)?,
            ur: store.add_glorot(&format!("{prefix}.ur"), d, d, rng)?,
            br: store.add_zeros(&format!("{prefix}.br"), 1, d)?,
            wn: store.add_glorot(&format!("{prefix}.wn"), d_in, d, rng)?,
            un: store.add_glorot(&format!("{prefix}.un"), d, d, rng)?,
            bn: store.add_zeros(&format!("{prefix}.bn"), 1, d)?,
        })
    }
}

/// One GRU step with the gate convention fixed for this repo:
/// z = sigma(xWz + hUz + bz), r = sigma(xWr + hUr + br),
/// n = tanh(xWn + r o (hUn) + bn), h' = (1 - z) o h + z o n.
pub fn gru_step(t: &mut Tape, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let wz = t.param(p.wz);
    let uz = t.param(p.uz);
    let bz = t.param(p.bz);
    let wr = t.param(p.wr);
    let ur = t.param(p.ur);
    let br = t.param(p.br);
    let wn = t.param(p.wn);
    let un = t.param(p.un);
    let bn = t.param(p.bn);
    {
        let xv = t.value(x);
        let hv = t.value(h_prev);
        let wzv = t.value(wz);
        let uzv = t.value(uz);
        if xv.ncols() != wzv.nrows()
            || hv.ncols() != uzv.nrows()
            || wzv.ncols() != uzv.ncols()
            || xv.nrows() != hv.nrows()
        {
            return Err(Error::ShapeMismatch(format!(
                "gru step: x {:?}, h {:?}, Wz {:?}, Uz {:?}",
                xv.dim(),
                hv.dim(),
                wzv.dim(),
                uzv.dim()
            )));
        }
    }
    let gate = |t: &mut Tape, w: Var, u: Var, b: Var| {
        let xw = t.matmul(x, w);
        let hu = t.matmul(h_prev, u);
        let s = t.add(xw, hu);
        t.add_row(s, b)
    };
    let z_pre = gate(t, wz, uz, bz);
    let z = t.sigmoid(z_pre);
    let r_pre = gate(t, wr, ur, br);
    let r = t.sigmoid(r_pre);

    let xw = t.matmul(x, wn);
    let hu = t.matmul(h_prev, un);
    let rhu = t.mul(r, hu);
    let n_pre0 = t.add(xw, rhu);
    let n_pre = t.add_row(n_pre0, bn);
    let n = t.tanh(n_pre);

    let ones = {
        let dim = t.value(z).raw_dim();
        t.constant(Array2::ones(dim))
    };
    let omz = t.sub(ones, z);
    let keep = t.mul(omz, h_prev);
    let update = t.mul(z, n);
    Ok(t.add(keep, update))
}

/// Row-wise masked softmax over logits, with masked entries exactly zero.
/// The same mask applies to every row.
pub fn masked_softmax(t: &mut Tape, logits: Var, mask: &[bool]) -> Result<Var> {
    let (rows, cols) = t.value(logits).dim();
    if mask.len() != cols {
        return Err(Error::ShapeMismatch(format!(
            "softmax mask length {} vs {} columns",
            mask.len(),
            cols
        )));
    }
    let full = Array2::from_shape_fn((rows, cols), |(_, c)| mask[c]);
    t.masked_softmax_rows(logits, &full)
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V, with optional
/// key masking.
pub fn scaled_dot_attention(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (qd, kd, kn, vn) = {
        let qv = t.value(q);
        let kv = t.value(k);
        let vv = t.value(v);
        (qv.ncols(), kv.ncols(), kv.nrows(), vv.nrows())
    };
    if qd != kd {
        return Err(Error::ShapeMismatch(format!(
            "attention: query width {qd} vs key width {kd}"
        )));
    }
    if kn != vn {
        return Err(Error::ShapeMismatch(format!(
            "attention: {kn} keys vs {vn} values"
        )));
    }
    let kt = t.transpose(k);
    let scores = t.matmul(q, kt);
    let scaled = t.scale(scores, 1.0 / (qd as f64).sqrt());
    let probs = match key_mask {
        Some(mask) => masked_softmax(t, scaled, mask)?,
        None => masked_softmax(t, scaled, &vec![true; kn])?,
    };
    Ok(t.matmul(probs, v))
}

/// Projection weights for a single-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttnParams {
    pub fn register<R: rand::Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttnParams {
            wq: store.add_glorot(&format!("{prefix}.wq"), d, d, rng)?,
            wk: store.add_glorot(&format!("{prefix}.wk"), d, d, rng)?,
            wv: store.add_glorot(&format!("{prefix}.wv"), d, d, rng)?,
        })
    }
}

/// Residual self-attention across the agent axis at one time step:
/// h <- h + SelfAtt(h). Absent agents are masked out as keys and receive a
/// zero update as queries, leaving their input rows unchanged.
pub fn self_attention_block(
    t: &mut Tape,
    h: Var,
    present: &[bool],
    p: &AttnParams,
) -> Result<Var> {
    let n = t.value(h).nrows();
    if present.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "self-attention: {} agents vs mask of {}",
            n,
            present.len()
        )));
    }
    if !present.iter().any(|p| *p) {
        return Err(Error::AllMasked);
    }
    let wq = t.param(p.wq);
    let wk = t.param(p.wk);
    let wv = t.param(p.wv);
    let q = t.matmul(h, wq);
    let k = t.matmul(h, wk);
    let v = t.matmul(h, wv);
    let att = scaled_dot_attention(t, q, k, v, Some(present))?;
    let mask_col = Array2::from_shape_fn((n, 1), |(r, _)| if present[r] { 1.0 } else { 0.0 });
    let mask = t.constant(mask_col);
    let update = t.mul_col(att, mask);
    Ok(t.add(h, update))
}

/// Repeats a 1 x d row n times, with gradients summed back into the row.
pub fn tile_rows(t: &mut Tape, row: Var, n: usize) -> Var {
    debug_assert_eq!(t.value(row).nrows(), 1);
    let ones = t.constant(Array2::ones((n, 1)));
    t.matmul(ones, row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_zero_weights_zero_output() {
        let mut store = ParamStore::new();
        let w = store.add_zeros("w", 3, 2).unwrap();
        let b = store.add_zeros("b", 1, 2).unwrap();
        let mut t = Tape::new(&store);
        let x = t.row(&[1.0, -2.0, 0.5]);
        let y = mlp_forward(&mut t, x, &[LayerParams { w, b }]).unwrap();
        assert_eq!(t.value(y), &array![[0.0, 0.0]]);
    }

    #[test]
    fn mlp_identity_passthrough() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = store.add_zeros("b", 1, 2).unwrap();
        let mut t = Tape::new(&store);
        let x = t.row(&[1.0, 2.0]);
        let y = mlp_forward(&mut t, x, &[LayerParams { w, b }]).unwrap();
        assert_eq!(t.value(y), &array![[1.0, 2.0]]);
    }

    #[test]
    fn mlp_shape_mismatch() {
        let mut store = ParamStore::new();
        let w = store.add_zeros("w", 4, 2).unwrap();
        let b = store.add_zeros("b", 1, 2).unwrap();
        let mut t = Tape::new(&store);
        let x = t.row(&[1.0, 2.0]);
        assert!(matches!(
            mlp_forward(&mut t, x, &[LayerParams { w, b }]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gru_zero_params_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::register(&mut store, "g", 3, 4, &mut rng).unwrap();
        // Overwrite with zeros: z = 0.5, n = 0, h' = 0.5*0 + 0.5*0 = 0.
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut t = Tape::new(&store);
        let x = t.row(&[1.0, 2.0, 3.0]);
        let h0 = t.zeros(1, 4);
        let h1 = gru_step(&mut t, x, h0, &p).unwrap();
        assert_eq!(t.value(h1), &Array2::zeros((1, 4)));
    }

    #[test]
    fn gru_output_bounded_from_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = GruParams::register(&mut store, "g", 3, 4, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let x = t.row(&[10.0, -20.0, 5.0]);
        let h0 = t.zeros(1, 4);
        let h1 = gru_step(&mut t, x, h0, &p).unwrap();
        // h' = z o n with h = 0: a convex combination of 0 and tanh output.
        assert!(t.value(h1).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn softmax_uniform_and_ratio() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.row(&[1.0, 1.0, 1.0]);
        let p = masked_softmax(&mut t, a, &[true, true, true]).unwrap();
        for c in 0..3 {
            assert!((t.value(p)[[0, c]] - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = t.row(&[0.0, 2f64.ln()]);
        let q = masked_softmax(&mut t, b, &[true, true]).unwrap();
        assert!((t.value(q)[[0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.value(q)[[0, 1]] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let q = t.constant(array![[3.0, -1.0], [0.0, 0.0]]);
        let k = t.constant(array![[0.2, 0.4]]);
        let v = t.constant(array![[7.0, -2.0, 1.0]]);
        let out = scaled_dot_attention(&mut t, q, k, v, None).unwrap();
        assert_eq!(t.value(out), &array![[7.0, -2.0, 1.0], [7.0, -2.0, 1.0]]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let q = t.constant(array![[1.0, 1.0]]);
        let k = t.constant(array![[0.5, 0.5], [0.5, 0.5]]);
        let v = t.constant(array![[2.0], [6.0]]);
        let out = scaled_dot_attention(&mut t, q, k, v, None).unwrap();
        assert!((t.value(out)[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn self_attention_masked_agent_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttnParams::register(&mut store, "att", 2, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let h = t.constant(array![[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]]);
        let out = self_attention_block(&mut t, h, &[true, false, true], &p).unwrap();
        let hv = t.value(h).clone();
        let ov = t.value(out).clone();
        assert_eq!(ov.row(1), hv.row(1));
        assert_ne!(ov.row(0), hv.row(0));
    }

    #[test]
    fn self_attention_permutation_equivariance() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttnParams::register(&mut store, "att", 3, &mut rng).unwrap();
        let h_raw = array![[1.0, 2.0, 0.5], [-0.5, 0.25, 1.5], [3.0, -1.0, 0.0]];
        let perm = [2usize, 0, 1];

        let mut t1 = Tape::new(&store);
        let h1 = t1.constant(h_raw.clone());
        let o1 = self_attention_block(&mut t1, h1, &[true, true, true], &p).unwrap();
        let o1v = t1.value(o1).clone();

        let permuted = h_raw.select(ndarray::Axis(0), &perm);
        let mut t2 = Tape::new(&store);
        let h2 = t2.constant(permuted);
        let o2 = self_attention_block(&mut t2, h2, &[true, true, true], &p).unwrap();
        let o2v = t2.value(o2).clone();

        for (i, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((o2v[[i, c]] - o1v[[src, c]]).abs() < 1e-12);
            }
        }
    }
}
