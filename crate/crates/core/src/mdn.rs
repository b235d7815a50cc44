//! Laplace mixture density decoding of the target's future, and the loss
//! terms: best-mode negative log-likelihood, soft-target mode classification,
//! and the weighted total objective.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gru_step, masked_softmax, mlp_forward, GruParams, LayerParams, Tape, Var};
use crate::predecessor::PROB_FLOOR;

/// A mixture of `M` per-coordinate Laplace components over `t_f` steps.
/// Scales are strictly positive by construction of the decoder output map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceMixture {
    /// Locations, `modes x t_f x 2`, meters.
    pub mu: Vec<Vec<[f64; 2]>>,
    /// Scales, `modes x t_f x 2`, meters.
    pub b: Vec<Vec<[f64; 2]>>,
    /// Mode probabilities on the simplex, length `modes`.
    pub mode_probs: Vec<f64>,
}

impl LaplaceMixture {
    pub fn n_modes(&self) -> usize {
        self.mu.len()
    }

    pub fn t_f(&self) -> usize {
        self.mu.first().map(|m| m.len()).unwrap_or(0)
    }

    /// Translates all locations by `offset` (scales are unaffected).
    pub fn translated(&self, offset: [f64; 2]) -> LaplaceMixture {
        let mut out = self.clone();
        for mode in &mut out.mu {
            for p in mode.iter_mut() {
                p[0] += offset[0];
                p[1] += offset[1];
            }
        }
        out
    }
}

/// Tape nodes for the decoder outputs, kept for the loss graph. Location and
/// scale rows are `1 x 2M`, laid out mode-major: columns `2m` and `2m + 1`
/// belong to mode `m`.
#[derive(Debug, Clone)]
pub struct DecodeNodes {
    pub mu_steps: Vec<Var>,
    pub b_steps: Vec<Var>,
    pub mode_probs: Var,
}

/// Decoder parameters: input MLP, GRU, and the three output heads.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub mlp: Vec<LayerParams>,
    pub gru: GruParams,
    pub mu_head: LayerParams,
    pub b_head: LayerParams,
    pub pi_head: LayerParams,
}

/// Runs the decoder over the future horizon. At each step the GRU consumes
/// the target's step encoding concatenated with the top-K aggregate, passed
/// through the input MLP. Heads emit locations (affine), scales
/// (`ELU(.) + 1 + eps`), and mode logits pooled over steps into one softmax
/// per trajectory.
pub fn decode(
    t: &mut Tape,
    p: &DecoderParams,
    target_steps: &[Var],
    aggregate_steps: &[Var],
    h0: Var,
    modes: usize,
    elu_eps: f64,
) -> Result<(LaplaceMixture, DecodeNodes)> {
    if target_steps.len() != aggregate_steps.len() || target_steps.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "decoder: {} target steps vs {} aggregate steps",
            target_steps.len(),
            aggregate_steps.len()
        )));
    }
    let t_f = target_steps.len();
    let mut h = h0;
    let mut mu_steps = Vec::with_capacity(t_f);
    let mut b_steps = Vec::with_capacity(t_f);
    let mut h_sum: Option<Var> = None;
    for step in 0..t_f {
        let inp = t.concat_cols(&[target_steps[step], aggregate_steps[step]]);
        let x = mlp_forward(t, inp, &p.mlp)?;
        h = gru_step(t, x, h, &p.gru)?;
        let mu = mlp_forward(t, h, &[p.mu_head])?;
        let braw = mlp_forward(t, h, &[p.b_head])?;
        let belu = t.elu(braw);
        let b = t.add_scalar(belu, 1.0 + elu_eps);
        if t.value(mu).ncols() != 2 * modes {
            return Err(Error::ShapeMismatch(format!(
                "decoder location head emits {} columns, expected {}",
                t.value(mu).ncols(),
                2 * modes
            )));
        }
        mu_steps.push(mu);
        b_steps.push(b);
        h_sum = Some(match h_sum {
            None => h,
            Some(acc) => t.add(acc, h),
        });
    }
    let mean_h = t.scale(h_sum.expect("t_f >= 1"), 1.0 / t_f as f64);
    let pi_logits = mlp_forward(t, mean_h, &[p.pi_head])?;
    if t.value(pi_logits).ncols() != modes {
        return Err(Error::ShapeMismatch(format!(
            "decoder mode head emits {} columns, expected {modes}",
            t.value(pi_logits).ncols()
        )));
    }
    let pi = masked_softmax(t, pi_logits, &vec![true; modes])?;

    let mut mixture = LaplaceMixture {
        mu: vec![vec![[0.0; 2]; t_f]; modes],
        b: vec![vec![[0.0; 2]; t_f]; modes],
        mode_probs: (0..modes).map(|m| t.value(pi)[[0, m]]).collect(),
    };
    for step in 0..t_f {
        let muv = t.value(mu_steps[step]);
        let bv = t.value(b_steps[step]);
        for m in 0..modes {
            mixture.mu[m][step] = [muv[[0, 2 * m]], muv[[0, 2 * m + 1]]];
            mixture.b[m][step] = [bv[[0, 2 * m]], bv[[0, 2 * m + 1]]];
        }
    }
    Ok((
        mixture,
        DecodeNodes {
            mu_steps,
            b_steps,
            mode_probs: pi,
        },
    ))
}

/// The mode with minimum summed per-step L2 error against the ground truth;
/// ties go to the lowest mode index.
pub fn best_mode(mix: &LaplaceMixture, gt: &[[f64; 2]]) -> usize {
    assert_eq!(gt.len(), mix.t_f(), "ground truth must cover the horizon");
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (m, mode) in mix.mu.iter().enumerate() {
        let err: f64 = mode
            .iter()
            .zip(gt)
            .map(|(p, y)| ((p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)).sqrt())
            .sum();
        if err < best_err {
            best_err = err;
            best = m;
        }
    }
    best
}

/// Mean over steps of the per-coordinate Laplace negative log-likelihood of
/// mode `m_star`: (1/t_f) sum_t sum_c [ln(2 b) + |y - mu| / b].
pub fn laplace_nll(t: &mut Tape, nodes: &DecodeNodes, gt: &[[f64; 2]], m_star: usize) -> Var {
    let t_f = nodes.mu_steps.len();
    assert_eq!(gt.len(), t_f);
    let mut acc = t.zeros(1, 1);
    for step in 0..t_f {
        let mu = t.slice_cols(nodes.mu_steps[step], 2 * m_star, 2);
        let b = t.slice_cols(nodes.b_steps[step], 2 * m_star, 2);
        let y = t.row(&gt[step]);
        let diff = t.sub(y, mu);
        let adiff = t.abs(diff);
        let ratio = t.div(adiff, b);
        let two_b = t.scale(b, 2.0);
        let ln2b = t.ln(two_b);
        let term = t.add(ln2b, ratio);
        let term_sum = t.sum_all(term);
        acc = t.add(acc, term_sum);
    }
    t.scale(acc, 1.0 / t_f as f64)
}

/// Soft classification targets: softmax over modes of minus the final-step
/// L2 displacement divided by the temperature. Smaller displacement means a
/// larger target. Plain values: no gradient flows through the targets.
pub fn soft_targets(mix: &LaplaceMixture, gt: &[[f64; 2]], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0);
    let last = gt.len() - 1;
    let scores: Vec<f64> = mix
        .mu
        .iter()
        .map(|mode| {
            let p = mode[last];
            let y = gt[last];
            let disp = ((p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)).sqrt();
            -disp / tau
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mode classification loss: sum_m -pi_m ln(pihat_m), with the predicted
/// probabilities floored before the logarithm and the targets held constant.
pub fn cls_loss(t: &mut Tape, mode_probs: Var, targets: &[f64]) -> Var {
    let n = t.value(mode_probs).ncols();
    assert_eq!(targets.len(), n);
    let tc = t.constant(Array2::from_shape_vec((1, n), targets.to_vec()).unwrap());
    let pc = t.clamp_min(mode_probs, PROB_FLOOR);
    let lnp = t.ln(pc);
    let prod = t.mul(tc, lnp);
    let s = t.sum_all(prod);
    t.scale(s, -1.0)
}

/// Weighted total objective: lambda * l_pns + l_cls + l_nll.
pub fn total_loss(t: &mut Tape, l_pns: Var, l_cls: Var, l_nll: Var, lambda: f64) -> Var {
    let weighted = t.scale(l_pns, lambda);
    let partial = t.add(weighted, l_cls);
    t.add(partial, l_nll)
}

/// The three loss terms and their weighted total, as plain values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_pns: f64,
    pub l_cls: f64,
    pub l_nll: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.l_pns.is_finite()
            && self.l_cls.is_finite()
            && self.l_nll.is_finite()
            && self.total.is_finite()
    }
}
