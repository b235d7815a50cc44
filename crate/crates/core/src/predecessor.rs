//! Predecessor tracing: per-future-step influence probabilities over
//! candidate neighbors, ground-truth labeling by nearest observed trace,
//! top-K aggregation for the decoder, the tracing loss, and the optional
//! distance/field-of-view candidate filter.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gru_step, masked_softmax, mlp_forward, scaled_dot_attention, tile_rows, AttnParams, GruParams,
    LayerParams, ParamId, Tape, Var,
};
use crate::scene::Scene;

/// Probability floor applied before logarithms in the losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Distance metric used for ground-truth predecessor labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
}

impl Metric {
    pub fn dist(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        match self {
            Metric::L1 => dx.abs() + dy.abs(),
            Metric::L2 => (dx * dx + dy * dy).sqrt(),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Neighbors eligible as predecessor candidates: everyone except the target
/// that is present for at least two observed steps.
pub fn base_candidates(scene: &Scene) -> Vec<bool> {
    (0..scene.n_agents())
        .map(|a| a != scene.target_index && scene.observed_steps(a) >= 2)
        .collect()
}

/// Threshold filter over candidates: keep a neighbor iff its last observed
/// position lies within `d_max` meters of the target's and the bearing from
/// the target to the neighbor is within +-`fov_deg` of the target's heading.
/// A target with no recent motion accepts all bearings.
pub fn candidate_filter(scene: &Scene, d_max: f64, fov_deg: f64) -> Vec<bool> {
    let target = scene.target_index;
    let anchor = scene.positions[target][scene.t_h - 1];
    let prev = scene.positions[target][scene.t_h.saturating_sub(2)];
    let heading = [anchor[0] - prev[0], anchor[1] - prev[1]];
    let heading_norm = (heading[0] * heading[0] + heading[1] * heading[1]).sqrt();
    let fov_rad = fov_deg.to_radians();

    (0..scene.n_agents())
        .map(|a| {
            if a == target {
                return false;
            }
            let last = match scene.last_observed_step(a) {
                Some(t) => scene.positions[a][t],
                None => return false,
            };
            let rel = [last[0] - anchor[0], last[1] - anchor[1]];
            let dist = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
            if dist > d_max {
                return false;
            }
            if heading_norm < 1e-9 || dist < 1e-12 {
                // Zero-motion fallback (full field of view), or co-located.
                return true;
            }
            let cos = (rel[0] * heading[0] + rel[1] * heading[1]) / (dist * heading_norm);
            let angle = cos.clamp(-1.0, 1.0).acos();
            angle <= fov_rad
        })
        .collect()
}

/// Per-agent hidden vectors over the future horizon, produced by unrolling a
/// dedicated GRU from each agent's final observed hidden state with a learned
/// constant input. No future ground-truth positions are read.
#[derive(Debug, Clone)]
pub struct RelationEncodings {
    pub steps: Vec<Var>,
    pub n_agents: usize,
    pub dim: usize,
}

pub fn relation_encodings(
    t: &mut Tape,
    gru: &GruParams,
    const_input: ParamId,
    last_hidden: Var,
    t_f: usize,
) -> Result<RelationEncodings> {
    let (n_agents, dim) = t.value(last_hidden).dim();
    let c = t.param(const_input);
    let x = tile_rows(t, c, n_agents);
    let mut h = last_hidden;
    let mut steps = Vec::with_capacity(t_f);
    for _ in 0..t_f {
        h = gru_step(t, x, h, gru)?;
        steps.push(h);
    }
    Ok(RelationEncodings { steps, n_agents, dim })
}

/// Influence mapping for one (target, candidate) pair at one step: an MLP over
/// the concatenation of the target encoding, the candidate encoding, and the
/// cross-attention context.
pub fn influence_logit(
    t: &mut Tape,
    mlp: &[LayerParams],
    h_i: Var,
    h_p: Var,
    s_ip: Var,
) -> Result<Var> {
    let feat = t.concat_cols(&[h_i, h_p, s_ip]);
    mlp_forward(t, feat, mlp)
}

/// Influence logits for every agent row at every future step. Queries come
/// from the candidate encodings; keys and values from the target's observed
/// hidden sequence, or from the target's own step encoding in single-vector
/// mode.
#[allow(clippy::too_many_arguments)]
pub fn influence_logits(
    t: &mut Tape,
    attn: &AttnParams,
    mlp: &[LayerParams],
    target: usize,
    target_obs_seq: Var,
    rel: &RelationEncodings,
    single_vector: bool,
) -> Result<Vec<Var>> {
    let wq = t.param(attn.wq);
    let wk = t.param(attn.wk);
    let wv = t.param(attn.wv);
    let mut out = Vec::with_capacity(rel.steps.len());
    for &rel_t in &rel.steps {
        let h_i = t.gather_rows(rel_t, &[target]);
        let q = t.matmul(rel_t, wq);
        let kv_src = if single_vector { h_i } else { target_obs_seq };
        let k = t.matmul(kv_src, wk);
        let v = t.matmul(kv_src, wv);
        let s = scaled_dot_attention(t, q, k, v, None)?;
        let tile = tile_rows(t, h_i, rel.n_agents);
        let feat = t.concat_cols(&[tile, rel_t, s]);
        let logits = mlp_forward(t, feat, mlp)?;
        out.push(logits);
    }
    Ok(out)
}

/// Per-future-step probability rows over candidates, plus labeling state.
#[derive(Debug, Clone)]
pub struct PredecessorDistribution {
    /// One 1 x N probability row node per future step.
    pub step_probs: Vec<Var>,
    /// Extracted probabilities, t_f x N. Masked columns are exactly zero.
    pub probs: Array2<f64>,
    pub candidate_mask: Vec<bool>,
    /// One-hot rows, t_f x N, when labels have been attached.
    pub gt_labels: Option<Array2<f64>>,
    /// True when no candidate survived and the prediction falls back to
    /// conditioning on past trajectories alone.
    pub rollback: bool,
}

/// Row-wise masked softmax over the candidate axis. With zero candidates the
/// distribution is empty (all-zero rows) and the rollback flag is set.
pub fn predecessor_distribution(
    t: &mut Tape,
    step_logits: &[Var],
    candidate_mask: &[bool],
) -> Result<PredecessorDistribution> {
    let t_f = step_logits.len();
    let n = candidate_mask.len();
    let n_candidates = candidate_mask.iter().filter(|c| **c).count();
    let mut step_probs = Vec::with_capacity(t_f);
    let mut probs = Array2::zeros((t_f, n));
    if n_candidates == 0 {
        for _ in 0..t_f {
            step_probs.push(t.zeros(1, n));
        }
        return Ok(PredecessorDistribution {
            step_probs,
            probs,
            candidate_mask: candidate_mask.to_vec(),
            gt_labels: None,
            rollback: true,
        });
    }
    for (i, &logits) in step_logits.iter().enumerate() {
        let row = t.transpose(logits);
        let p = masked_softmax(t, row, candidate_mask)?;
        for c in 0..n {
            probs[[i, c]] = t.value(p)[[0, c]];
        }
        step_probs.push(p);
    }
    Ok(PredecessorDistribution {
        step_probs,
        probs,
        candidate_mask: candidate_mask.to_vec(),
        gt_labels: None,
        rollback: false,
    })
}

/// Ground-truth labels: for each future step, the candidate whose observed
/// trace comes closest to the target's position at that step. Ties go to the
/// lowest agent index; steps with no candidates get an all-zero row.
pub fn label_predecessors(
    scene: &Scene,
    candidate_mask: &[bool],
    metric: Metric,
) -> Array2<f64> {
    let n = scene.n_agents();
    let mut labels = Array2::zeros((scene.t_f, n));
    for (t, row) in labeled_with_distance(scene, candidate_mask, metric)
        .into_iter()
        .enumerate()
    {
        if let Some((idx, _)) = row {
            labels[[t, idx]] = 1.0;
        }
    }
    labels
}

/// Like [`label_predecessors`], also reporting the winning trace distance.
pub fn labeled_with_distance(
    scene: &Scene,
    candidate_mask: &[bool],
    metric: Metric,
) -> Vec<Option<(usize, f64)>> {
    let target = scene.target_index;
    let mut out = Vec::with_capacity(scene.t_f);
    for t in 0..scene.t_f {
        let y = scene.positions[target][scene.t_h + t];
        let mut best: Option<(usize, f64)> = None;
        for (a, &ok) in candidate_mask.iter().enumerate() {
            if !ok {
                continue;
            }
            let mut d = f64::INFINITY;
            for s in 0..scene.t_h {
                if scene.presence[a][s] {
                    d = d.min(metric.dist(y, scene.positions[a][s]));
                }
            }
            if d.is_finite() {
                match best {
                    Some((_, bd)) if bd <= d => {}
                    _ => best = Some((a, d)),
                }
            }
        }
        out.push(best);
    }
    out
}

/// The ranked top-K slice of the distribution, one flattened
/// `1 x K*(dim + 1)` vector per future step: K (encoding, probability) pairs
/// in descending probability order, zero-padded when fewer candidates exist.
#[derive(Debug, Clone)]
pub struct TopKAggregate {
    pub step_vectors: Vec<Var>,
    /// Selected candidate indices per step, in rank order.
    pub selected: Vec<Vec<usize>>,
    pub k: usize,
    pub dim: usize,
}

/// Selection by probability descending, ties broken by ascending index.
pub fn rank_candidates(probs_row: &[f64], candidate_mask: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = candidate_mask
        .iter()
        .enumerate()
        .filter(|(_, ok)| **ok)
        .map(|(i, _)| i)
        .collect();
    order.sort_by(|&a, &b| {
        probs_row[b]
            .partial_cmp(&probs_row[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    order
}

pub fn topk_aggregate(
    t: &mut Tape,
    dist: &PredecessorDistribution,
    rel: &RelationEncodings,
    k: usize,
) -> TopKAggregate {
    assert!(k >= 1, "k must be at least 1");
    let dim = rel.dim;
    let slot = dim + 1;
    let mut step_vectors = Vec::with_capacity(rel.steps.len());
    let mut selected = Vec::with_capacity(rel.steps.len());
    for (i, &rel_t) in rel.steps.iter().enumerate() {
        if dist.rollback {
            step_vectors.push(t.zeros(1, k * slot));
            selected.push(Vec::new());
            continue;
        }
        let probs_row: Vec<f64> = dist.probs.row(i).to_vec();
        let order = rank_candidates(&probs_row, &dist.candidate_mask);
        let take: Vec<usize> = order.into_iter().take(k).collect();
        let mut parts = Vec::with_capacity(k);
        for &idx in &take {
            let h = t.gather_rows(rel_t, &[idx]);
            let p = t.slice_cols(dist.step_probs[i], idx, 1);
            parts.push(t.concat_cols(&[h, p]));
        }
        for _ in take.len()..k {
            parts.push(t.zeros(1, slot));
        }
        step_vectors.push(t.concat_cols(&parts));
        selected.push(take);
    }
    TopKAggregate {
        step_vectors,
        selected,
        k,
        dim,
    }
}

/// Tracing loss: per-candidate binary cross-entropy summed over candidates
/// and future steps (or categorical cross-entropy of the labeled candidate
/// when `binary` is false). Steps without candidates contribute zero.
pub fn pns_loss(
    t: &mut Tape,
    dist: &PredecessorDistribution,
    labels: &Array2<f64>,
    binary: bool,
) -> Var {
    let n = dist.candidate_mask.len();
    if dist.rollback {
        return t.zeros(1, 1);
    }
    let mut acc = t.zeros(1, 1);
    for (i, &p) in dist.step_probs.iter().enumerate() {
        let mut w1 = Array2::zeros((1, n));
        let mut w2 = Array2::zeros((1, n));
        for c in 0..n {
            let label = labels[[i, c]];
            w1[[0, c]] = label;
            if dist.candidate_mask[c] && label == 0.0 {
                w2[[0, c]] = 1.0;
            }
        }
        let w1 = t.constant(w1);
        let pc = t.clamp_min(p, PROB_FLOOR);
        let lnp = t.ln(pc);
        let pos = t.mul(w1, lnp);
        let pos_sum = t.sum_all(pos);
        acc = t.add(acc, pos_sum);
        if binary {
            let w2 = t.constant(w2);
            let neg_p = t.scale(p, -1.0);
            let one_minus = t.add_scalar(neg_p, 1.0);
            let omc = t.clamp_min(one_minus, PROB_FLOOR);
            let lnq = t.ln(omc);
            let neg = t.mul(w2, lnq);
            let neg_sum = t.sum_all(neg);
            acc = t.add(acc, neg_sum);
        }
    }
    t.scale(acc, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{all_entries, grad_check, sample_entries, GradStore, ParamStore, FD_STEP};
    use crate::scene::{build_scene, AgentTrack};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_scene(offsets: &[[f64; 2]]) -> Scene {
        // Target walks +x from origin; neighbor k is the target's path shifted
        // by offsets[k].
        let mut tracks = vec![AgentTrack {
            id: 0,
            points: (0..20).map(|t| (t, [t as f64 * 0.5, 0.0])).collect(),
        }];
        for (k, off) in offsets.iter().enumerate() {
            tracks.push(AgentTrack {
                id: k as i64 + 1,
                points: (0..20)
                    .map(|t| (t, [t as f64 * 0.5 + off[0], off[1]]))
                    .collect(),
            });
        }
        build_scene(&tracks, 0, 8, 12).unwrap()
    }

    #[test]
    fn labeling_prefers_nearest_trace() {
        // Neighbor A hugs the target's future; neighbor B is far away.
        let mut tracks = vec![
            AgentTrack {
                id: 0,
                points: (0..20).map(|t| (t, [t as f64, 0.0])).collect(),
            },
            AgentTrack {
                id: 1,
                points: (0..20).map(|t| (t, [t as f64 + 0.1, 0.0])).collect(),
            },
            AgentTrack {
                id: 2,
                points: (0..20).map(|t| (t, [5.0, 50.0])).collect(),
            },
        ];
        tracks[0].points = (0..20).map(|t| (t, [1.0 + t as f64, 0.0])).collect();
        let scene = build_scene(&tracks, 0, 8, 12).unwrap();
        let mask = base_candidates(&scene);
        let labels = label_predecessors(&scene, &mask, Metric::L2);
        for t in 0..scene.t_f {
            assert_eq!(labels[[t, 1]], 1.0, "step {t}");
            assert_eq!(labels[[t, 2]], 0.0);
        }
    }

    #[test]
    fn labeling_tie_breaks_to_lowest_index() {
        // Two neighbors at mirror-image offsets: identical distances.
        let scene = toy_scene(&[[0.0, 2.0], [0.0, -2.0]]);
        let mask = base_candidates(&scene);
        let labels = label_predecessors(&scene, &mask, Metric::L2);
        for t in 0..scene.t_f {
            assert_eq!(labels[[t, 1]], 1.0);
            assert_eq!(labels[[t, 2]], 0.0);
        }
    }

    #[test]
    fn labeling_matches_bruteforce_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.gen_range(1..8usize);
            let mut tracks = vec![AgentTrack {
                id: 0,
                points: (0..20)
                    .map(|t| (t, [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]))
                    .collect(),
            }];
            for a in 0..n {
                let len = rng.gen_range(1..21usize);
                let start = rng.gen_range(0..(21 - len));
                tracks.push(AgentTrack {
                    id: a as i64 + 1,
                    points: (start..start + len)
                        .map(|t| (t, [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]))
                        .collect(),
                });
            }
            let scene = build_scene(&tracks, 0, 8, 12).unwrap();
            let mask = base_candidates(&scene);
            for metric in [Metric::L1, Metric::L2] {
                let fast = label_predecessors(&scene, &mask, metric);
                // Exhaustive per-pair oracle.
                for t in 0..scene.t_f {
                    let y = scene.positions[scene.target_index][scene.t_h + t];
                    let mut best: Option<(usize, f64)> = None;
                    for a in 0..scene.n_agents() {
                        if !mask[a] {
                            continue;
                        }
                        for s in 0..scene.t_h {
                            if !scene.presence[a][s] {
                                continue;
                            }
                            let d = metric.dist(y, scene.positions[a][s]);
                            let better = match best {
                                None => true,
                                Some((ba, bd)) => d < bd || (d == bd && a < ba),
                            };
                            if better {
                                best = Some((a, d));
                            }
                        }
                    }
                    match best {
                        None => assert!(fast.row(t).iter().all(|v| *v == 0.0)),
                        Some((a, _)) => {
                            assert_eq!(fast[[t, a]], 1.0);
                            assert_eq!(fast.row(t).sum(), 1.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn labeling_translation_and_scale_invariant() {
        let scene = toy_scene(&[[1.0, 1.0], [-3.0, 2.0], [0.5, -4.0]]);
        let mask = base_candidates(&scene);
        let base = label_predecessors(&scene, &mask, Metric::L2);

        let shifted = scene.shift([123.4, -56.7]);
        assert_eq!(label_predecessors(&shifted, &mask, Metric::L2), base);

        let mut scaled = scene.clone();
        for a in 0..scaled.n_agents() {
            for t in 0..scaled.total_steps() {
                scaled.positions[a][t][0] *= 3.5;
                scaled.positions[a][t][1] *= 3.5;
            }
        }
        assert_eq!(label_predecessors(&scaled, &mask, Metric::L2), base);
    }

    #[test]
    fn l1_l2_labels_differ_on_adversarial_scene() {
        // Target future at the origin-ish; candidate A at (3.0, 0.1) from a
        // one-point trace, candidate B at (2.2, 2.2): L2 favors A
        // (3.0017 < 3.111), L1 favors B (4.4 > 3.1 -> A smaller L1 too)...
        // pick values where orderings swap: A = (0, 5), B = (3.8, 3.8).
        // L1: A = 5.0 < B = 7.6; L2: A = 5.0 > B = 5.374? No: use
        // A = (0, 5) d2 = 5, d1 = 5; B = (3.6, 3.6) d2 = 5.091, d1 = 7.2.
        // Correct construction: L1 ties need care; use A = (4.9, 0),
        // B = (3.5, 3.5): L1(A) = 4.9 < L1(B) = 7.0, L2(A) = 4.9 < 4.95.
        // Swap requires diagonal advantage: A = (5, 0): L1 = 5, L2 = 5;
        // B = (3.6, 3.4): L1 = 7 > 5, L2 = 4.95 < 5. So L2 picks B, L1 picks A.
        let mut tracks = vec![AgentTrack {
            id: 0,
            points: (0..20).map(|t| (t, [0.0, 0.0])).collect(),
        }];
        tracks.push(AgentTrack {
            id: 1,
            points: vec![(0, [5.0, 0.0]), (1, [5.0, 0.0])],
        });
        tracks.push(AgentTrack {
            id: 2,
            points: vec![(0, [3.6, 3.4]), (1, [3.6, 3.4])],
        });
        let scene = build_scene(&tracks, 0, 8, 12).unwrap();
        let mask = base_candidates(&scene);
        let l1 = label_predecessors(&scene, &mask, Metric::L1);
        let l2 = label_predecessors(&scene, &mask, Metric::L2);
        assert_eq!(l1[[0, 1]], 1.0);
        assert_eq!(l2[[0, 2]], 1.0);
        assert_ne!(l1, l2);
    }

    #[test]
    fn filter_thresholds() {
        // Target heads +x. Candidate 1 at 25 m ahead; candidate 2 directly
        // behind at 5 m; candidate 3 ahead at 10 m.
        let mut tracks = vec![AgentTrack {
            id: 0,
            points: (0..20).map(|t| (t, [t as f64, 0.0])).collect(),
        }];
        let anchor_x = 7.0;
        for (id, off) in [(1i64, [25.0, 0.0]), (2, [-5.0, 0.0]), (3, [10.0, 0.0])] {
            tracks.push(AgentTrack {
                id,
                points: (0..20)
                    .map(|t| (t, [anchor_x + off[0], off[1]]))
                    .collect(),
            });
        }
        let scene = build_scene(&tracks, 0, 8, 12).unwrap();
        let mask = candidate_filter(&scene, 20.0, 90.0);
        assert!(!mask[1], "25 m exceeds d_max");
        assert!(!mask[2], "directly behind is outside the field of view");
        assert!(mask[3], "10 m ahead is kept");
    }

    #[test]
    fn filter_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..7usize);
            let mut tracks = vec![AgentTrack {
                id: 0,
                points: (0..20)
                    .map(|t| (t, [t as f64 * rng.gen_range(0.1..1.0), 0.0]))
                    .collect(),
            }];
            for a in 0..n {
                tracks.push(AgentTrack {
                    id: a as i64 + 1,
                    points: (0..20)
                        .map(|t| {
                            (t, [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)])
                        })
                        .collect(),
                });
            }
            let scene = build_scene(&tracks, 0, 8, 12).unwrap();
            let tight = candidate_filter(&scene, 10.0, 45.0);
            let wide = candidate_filter(&scene, 25.0, 120.0);
            for a in 0..scene.n_agents() {
                assert!(!tight[a] || wide[a], "enlarged thresholds must keep supersets");
            }
        }
    }

    fn tiny_setup(
        seed: u64,
        n: usize,
        d: usize,
        t_h: usize,
        t_f: usize,
    ) -> (ParamStore, AttnParams, Vec<LayerParams>, GruParams, ParamId, Array2<f64>, Array2<f64>)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = AttnParams::register(&mut store, "att", d, &mut rng).unwrap();
        let w0 = store.add_glorot("mlp.w0", 3 * d, d, &mut rng).unwrap();
        let b0 = store.add_zeros("mlp.b0", 1, d).unwrap();
        let w1 = store.add_glorot("mlp.w1", d, 1, &mut rng).unwrap();
        let b1 = store.add_zeros("mlp.b1", 1, 1).unwrap();
        let mlp = vec![LayerParams { w: w0, b: b0 }, LayerParams { w: w1, b: b1 }];
        let gru = GruParams::register(&mut store, "rel", d, d, &mut rng).unwrap();
        let cst = store.add_glorot("rel.c", 1, d, &mut rng).unwrap();
        let last_hidden = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let obs_seq = Array2::from_shape_fn((t_h, d), |_| rng.gen_range(-1.0..1.0));
        let _ = t_f;
        (store, attn, mlp, gru, cst, last_hidden, obs_seq)
    }

    fn pt_loss_value(
        store: &ParamStore,
        attn: &AttnParams,
        mlp: &[LayerParams],
        gru: &GruParams,
        cst: ParamId,
        last_hidden: &Array2<f64>,
        obs_seq: &Array2<f64>,
        t_f: usize,
        mask: &[bool],
        labels: &Array2<f64>,
    ) -> (f64, Option<GradStore>, Array2<f64>) {
        let mut t = Tape::new(store);
        let lh = t.constant(last_hidden.clone());
        let os = t.constant(obs_seq.clone());
        let rel = relation_encodings(&mut t, gru, cst, lh, t_f).unwrap();
        let logits = influence_logits(&mut t, attn, mlp, 0, os, &rel, false).unwrap();
        let dist = predecessor_distribution(&mut t, &logits, mask).unwrap();
        let loss = pns_loss(&mut t, &dist, labels, true);
        let v = t.scalar_value(loss);
        let g = t.backward(loss);
        (v, Some(g), dist.probs)
    }

    #[test]
    fn distribution_rows_sum_to_one() {
        let n = 5;
        let t_f = 4;
        let (store, attn, mlp, gru, cst, lh, os) = tiny_setup(11, n, 6, 5, t_f);
        let mask = vec![false, true, true, false, true];
        let labels = Array2::zeros((t_f, n));
        let (_, _, probs) =
            pt_loss_value(&store, &attn, &mlp, &gru, cst, &lh, &os, t_f, &mask, &labels);
        for t in 0..t_f {
            let sum: f64 = probs.row(t).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_eq!(probs[[t, 0]], 0.0);
            assert_eq!(probs[[t, 3]], 0.0);
        }
    }

    #[test]
    fn single_candidate_gets_probability_one() {
        let n = 3;
        let t_f = 3;
        let (store, attn, mlp, gru, cst, lh, os) = tiny_setup(13, n, 4, 4, t_f);
        let mask = vec![false, false, true];
        let labels = Array2::zeros((t_f, n));
        let (_, _, probs) =
            pt_loss_value(&store, &attn, &mlp, &gru, cst, &lh, &os, t_f, &mask, &labels);
        for t in 0..t_f {
            assert_eq!(probs[[t, 2]], 1.0);
        }
    }

    #[test]
    fn zero_candidates_sets_rollback() {
        let (store, _, _, gru, cst, lh, _) = tiny_setup(17, 2, 4, 4, 3);
        let mut t = Tape::new(&store);
        let lhv = t.constant(lh);
        let rel = relation_encodings(&mut t, &gru, cst, lhv, 3).unwrap();
        let logits: Vec<Var> = rel.steps.iter().map(|_| t.zeros(2, 1)).collect();
        let dist = predecessor_distribution(&mut t, &logits, &[false, false]).unwrap();
        assert!(dist.rollback);
        assert!(dist.probs.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn uniform_logits_uniform_probabilities() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = vec![t.zeros(4, 1)];
        let dist = predecessor_distribution(&mut t, &logits, &[true; 4]).unwrap();
        for c in 0..4 {
            assert!((dist.probs[[0, c]] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn influence_logits_zero_mlp_are_zero() {
        let (mut store, attn, mlp, gru, cst, lh, os) = tiny_setup(19, 4, 4, 5, 2);
        for layer in &mlp {
            store.value_mut(layer.w).fill(0.0);
            store.value_mut(layer.b).fill(0.0);
        }
        let mut t = Tape::new(&store);
        let lhv = t.constant(lh);
        let osv = t.constant(os);
        let rel = relation_encodings(&mut t, &gru, cst, lhv, 2).unwrap();
        let logits = influence_logits(&mut t, &attn, &mlp, 0, osv, &rel, false).unwrap();
        for l in logits {
            assert!(t.value(l).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn influence_logits_permutation_consistent() {
        let (store, attn, mlp, gru, cst, lh, os) = tiny_setup(23, 4, 4, 5, 3);
        let run = |hidden: &Array2<f64>| -> Vec<Array2<f64>> {
            let mut t = Tape::new(&store);
            let lhv = t.constant(hidden.clone());
            let osv = t.constant(os.clone());
            let rel = relation_encodings(&mut t, &gru, cst, lhv, 3).unwrap();
            let logits = influence_logits(&mut t, &attn, &mlp, 0, osv, &rel, false).unwrap();
            logits.iter().map(|l| t.value(*l).clone()).collect()
        };
        let base = run(&lh);
        // Swap candidate rows 2 and 3 (keeping the target row 0 fixed).
        let mut swapped = lh.clone();
        for c in 0..lh.ncols() {
            swapped[[2, c]] = lh[[3, c]];
            swapped[[3, c]] = lh[[2, c]];
        }
        let perm = run(&swapped);
        for (b, p) in base.iter().zip(&perm) {
            assert!((b[[2, 0]] - p[[3, 0]]).abs() < 1e-12);
            assert!((b[[3, 0]] - p[[2, 0]]).abs() < 1e-12);
            assert!((b[[1, 0]] - p[[1, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn pns_loss_perfect_prediction_is_zero() {
        // One candidate: softmax gives it probability exactly 1.
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = vec![t.zeros(3, 1), t.zeros(3, 1)];
        let mask = vec![false, true, false];
        let dist = predecessor_distribution(&mut t, &logits, &mask).unwrap();
        let mut labels = Array2::zeros((2, 3));
        labels[[0, 1]] = 1.0;
        labels[[1, 1]] = 1.0;
        let loss = pns_loss(&mut t, &dist, &labels, true);
        assert_eq!(t.scalar_value(loss), 0.0);
    }

    #[test]
    fn pns_loss_uniform_analytic_value() {
        // 4 candidates, uniform 0.25, one-hot label, single step:
        // -ln 0.25 - 3 ln 0.75.
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = vec![t.zeros(4, 1)];
        let dist = predecessor_distribution(&mut t, &logits, &[true; 4]).unwrap();
        let mut labels = Array2::zeros((1, 4));
        labels[[0, 2]] = 1.0;
        let loss = pns_loss(&mut t, &dist, &labels, true);
        let expect = -(0.25f64.ln()) - 3.0 * (0.75f64.ln());
        assert!((t.scalar_value(loss) - expect).abs() < 1e-12);

        let loss_cat = {
            let mut t2 = Tape::new(&store);
            let logits = vec![t2.zeros(4, 1)];
            let dist = predecessor_distribution(&mut t2, &logits, &[true; 4]).unwrap();
            let l = pns_loss(&mut t2, &dist, &labels, false);
            t2.scalar_value(l)
        };
        assert!((loss_cat - -(0.25f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn topk_matches_sort_oracle_and_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..7usize);
            let d = 3;
            let t_f = 2;
            let k = rng.gen_range(1..4usize);
            let mask: Vec<bool> = (0..n).map(|i| i != 0 && rng.gen_bool(0.7)).collect();
            let store = ParamStore::new();
            let mut t = Tape::new(&store);
            let n_candidates = mask.iter().filter(|m| **m).count();
            let logits: Vec<Var> = (0..t_f)
                .map(|_| {
                    let col =
                        Array2::from_shape_fn((n, 1), |_| rng.gen_range(-2.0..2.0f64));
                    t.constant(col)
                })
                .collect();
            let dist = predecessor_distribution(&mut t, &logits, &mask).unwrap();
            let rel_steps: Vec<Var> = (0..t_f)
                .map(|_| {
                    let m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0f64));
                    t.constant(m)
                })
                .collect();
            let rel = RelationEncodings {
                steps: rel_steps,
                n_agents: n,
                dim: d,
            };
            let agg = topk_aggregate(&mut t, &dist, &rel, k);
            for (i, sel) in agg.selected.iter().enumerate() {
                // Sort-then-truncate oracle.
                let mut oracle: Vec<usize> = (0..n).filter(|&a| mask[a]).collect();
                oracle.sort_by(|&a, &b| {
                    dist.probs[[i, b]]
                        .partial_cmp(&dist.probs[[i, a]])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                oracle.truncate(k);
                assert_eq!(sel, &oracle);

                let vec_value = t.value(agg.step_vectors[i]).clone();
                assert_eq!(vec_value.dim(), (1, k * (d + 1)));
                // Probabilities non-increasing along the list; padded slots zero.
                let mut prev = f64::INFINITY;
                for slot in 0..k {
                    let pcol = vec_value[[0, slot * (d + 1) + d]];
                    if slot < sel.len() {
                        assert!(pcol <= prev + 1e-15);
                        prev = pcol;
                    } else {
                        for c in 0..=d {
                            assert_eq!(vec_value[[0, slot * (d + 1) + c]], 0.0);
                        }
                    }
                }
                let _ = n_candidates;
            }
        }
    }

    #[test]
    fn topk_invariant_under_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..100 {
            let n = 6;
            let mask: Vec<bool> = (0..n).map(|i| i != 0).collect();
            let logit_col = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-3.0..3.0f64));
            let shift = rng.gen_range(-50.0..50.0);
            let store = ParamStore::new();
            let mut t = Tape::new(&store);
            let a = t.constant(logit_col.clone());
            let b = t.constant(&logit_col + shift);
            let da = predecessor_distribution(&mut t, &[a], &mask).unwrap();
            let db = predecessor_distribution(&mut t, &[b], &mask).unwrap();
            let oa = rank_candidates(&da.probs.row(0).to_vec(), &mask);
            let ob = rank_candidates(&db.probs.row(0).to_vec(), &mask);
            assert_eq!(oa, ob);
        }
    }

    #[test]
    fn tracing_chain_gradients_match_finite_differences() {
        let n = 4;
        let d = 5;
        let t_h = 5;
        let t_f = 3;
        let (mut store, attn, mlp, gru, cst, lh, os) = tiny_setup(41, n, d, t_h, t_f);
        let mask = vec![false, true, true, true];
        let mut labels = Array2::zeros((t_f, n));
        labels[[0, 1]] = 1.0;
        labels[[1, 3]] = 1.0;
        labels[[2, 2]] = 1.0;

        let (_, grads, _) =
            pt_loss_value(&store, &attn, &mlp, &gru, cst, &lh, &os, t_f, &mask, &labels);
        let grads = grads.unwrap();
        let f = |p: &ParamStore| {
            pt_loss_value(p, &attn, &mlp, &gru, cst, &lh, &os, t_f, &mask, &labels).0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let entries = sample_entries(&store, 6, &mut rng);
        let err = grad_check(&mut store, f, &grads, FD_STEP, &entries);
        assert!(err < 1e-4, "tracing chain gradient error {err}");
    }

    #[test]
    fn relation_encodings_pure_over_identical_rows() {
        let (store, _, _, gru, cst, mut lh, _) = tiny_setup(43, 3, 4, 4, 4);
        for c in 0..lh.ncols() {
            lh[[1, c]] = lh[[2, c]];
        }
        let mut t = Tape::new(&store);
        let lhv = t.constant(lh);
        let rel = relation_encodings(&mut t, &gru, cst, lhv, 4).unwrap();
        for step in &rel.steps {
            let v = t.value(*step);
            for c in 0..v.ncols() {
                assert_eq!(v[[1, c]], v[[2, c]]);
            }
        }
    }

    #[test]
    fn relation_encodings_single_step() {
        let (store, _, _, gru, cst, lh, _) = tiny_setup(47, 2, 4, 4, 1);
        let mut t = Tape::new(&store);
        let lhv = t.constant(lh);
        let rel = relation_encodings(&mut t, &gru, cst, lhv, 1).unwrap();
        assert_eq!(rel.steps.len(), 1);
    }

    #[test]
    fn relation_encodings_gradients() {
        let (mut store, _, _, gru, cst, lh, _) = tiny_setup(53, 3, 4, 4, 3);
        let run = |p: &ParamStore| -> (f64, Option<GradStore>) {
            let mut t = Tape::new(p);
            let lhv = t.constant(lh.clone());
            let rel = relation_encodings(&mut t, &gru, cst, lhv, 3).unwrap();
            let cat = t.concat_rows(&rel.steps);
            let th = t.tanh(cat);
            let loss = t.sum_all(th);
            let v = t.scalar_value(loss);
            let g = t.backward(loss);
            (v, Some(g))
        };
        let (_, grads) = run(&store);
        let grads = grads.unwrap();
        let entries = all_entries(&store);
        let err = grad_check(&mut store, |p| run(p).0, &grads, FD_STEP, &entries);
        assert!(err < 1e-4, "relation encoding gradient error {err}");
    }
}
