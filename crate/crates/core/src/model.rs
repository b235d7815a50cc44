//! End-to-end model assembly: parameter registration, the per-scene forward
//! pass (encode, trace, aggregate, decode, losses), and checkpoint I/O.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdn::{
    best_mode, cls_loss, decode, laplace_nll, soft_targets, total_loss, DecoderParams,
    LaplaceMixture, LossBundle,
};
use crate::nn::{
    gru_step, self_attention_block, AttnParams, GradStore, GruParams, LayerParams, ParamStore,
    Tape, Var,
};
use crate::predecessor::{
    base_candidates, candidate_filter, influence_logits, label_predecessors, pns_loss,
    predecessor_distribution, relation_encodings, topk_aggregate, Metric,
};
use crate::scene::{normalize, obs_features, Scene, INPUT_FEATURES};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Distance/field-of-view candidate thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub d_max: f64,
    pub fov_deg: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            d_max: 20.0,
            fov_deg: 90.0,
        }
    }
}

/// Architecture and objective configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width of every encoder/tracing/decoder state.
    pub hidden: usize,
    /// Per-step input feature count.
    pub input_dim: usize,
    /// Predecessors aggregated for the decoder.
    pub k_top: usize,
    /// Mixture modes.
    pub modes: usize,
    /// Weight of the tracing loss in the total objective.
    pub lambda: f64,
    /// When false the tracing module is ablated: the decoder conditions on
    /// past trajectories alone.
    pub pt_enabled: bool,
    /// Per-candidate binary cross-entropy when true, categorical otherwise.
    pub binary_ce: bool,
    /// Attend candidate queries over the target's single step encoding
    /// instead of its observed hidden sequence.
    pub single_vector_attention: bool,
    pub label_metric: Metric,
    /// Optional candidate thresholds; disabled by default.
    pub filter: Option<FilterParams>,
    /// Scale-head floor in `ELU(.) + 1 + eps`.
    pub elu_eps: f64,
    /// Soft-target temperature, meters.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            input_dim: INPUT_FEATURES,
            k_top: 2,
            modes: 20,
            lambda: 0.5,
            pt_enabled: true,
            binary_ce: true,
            single_vector_attention: false,
            label_metric: Metric::L2,
            filter: None,
            elu_eps: 1e-3,
            tau: 1.0,
        }
    }
}

impl ModelConfig {
    /// Mixture sized for 2 Hz vehicle-style evaluation (top 5/10 modes).
    pub fn nuscenes_like() -> Self {
        ModelConfig {
            modes: 10,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.modes == 0 || self.k_top == 0 {
            return Err(Error::Config(
                "hidden, modes, and k_top must be positive".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.elu_eps <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("elu_eps and tau must be positive".into()));
        }
        Ok(())
    }
}

/// Resolved parameter handles for every component.
#[derive(Debug, Clone)]
pub struct ModelHandles {
    pub enc_mlp: Vec<LayerParams>,
    pub enc_gru: GruParams,
    pub obs_attn: AttnParams,
    pub rel_gru: GruParams,
    pub rel_const: crate::nn::ParamId,
    pub pt_attn: AttnParams,
    pub pt_mlp: Vec<LayerParams>,
    pub dec: DecoderParams,
}

/// Registers all model parameters in a deterministic order.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<(ParamStore, ModelHandles)> {
    cfg.validate()?;
    let d = cfg.hidden;
    let mut s = ParamStore::new();

    let enc_mlp = vec![
        LayerParams {
            w: s.add_glorot("enc.mlp.w0", cfg.input_dim, d, rng)?,
            b: s.add_zeros("enc.mlp.b0", 1, d)?,
        },
        LayerParams {
            w: s.add_glorot("enc.mlp.w1", d, d, rng)?,
            b: s.add_zeros("enc.mlp.b1", 1, d)?,
        },
    ];
    let enc_gru = GruParams::register(&mut s, "enc.gru", d, d, rng)?;
    let obs_attn = AttnParams::register(&mut s, "enc.att", d, rng)?;
    let rel_gru = GruParams::register(&mut s, "rel.gru", d, d, rng)?;
    let rel_const = s.add_glorot("rel.const", 1, d, rng)?;
    let pt_attn = AttnParams::register(&mut s, "pt.att", d, rng)?;
    let pt_mlp = vec![
        LayerParams {
            w: s.add_glorot("pt.mlp.w0", 3 * d, d, rng)?,
            b: s.add_zeros("pt.mlp.b0", 1, d)?,
        },
        LayerParams {
            w: s.add_glorot("pt.mlp.w1", d, 1, rng)?,
            b: s.add_zeros("pt.mlp.b1", 1, 1)?,
        },
    ];
    let dec_in = d + cfg.k_top * (d + 1);
    let dec = DecoderParams {
        mlp: vec![
            LayerParams {
                w: s.add_glorot("dec.mlp.w0", dec_in, d, rng)?,
                b: s.add_zeros("dec.mlp.b0", 1, d)?,
            },
            LayerParams {
                w: s.add_glorot("dec.mlp.w1", d, d, rng)?,
                b: s.add_zeros("dec.mlp.b1", 1, d)?,
            },
        ],
        gru: GruParams::register(&mut s, "dec.gru", d, d, rng)?,
        mu_head: LayerParams {
            w: s.add_glorot("dec.mu.w", d, 2 * cfg.modes, rng)?,
            b: s.add_zeros("dec.mu.b", 1, 2 * cfg.modes)?,
        },
        b_head: LayerParams {
            w: s.add_glorot("dec.b.w", d, 2 * cfg.modes, rng)?,
            b: s.add_zeros("dec.b.b", 1, 2 * cfg.modes)?,
        },
        pi_head: LayerParams {
            w: s.add_glorot("dec.pi.w", d, cfg.modes, rng)?,
            b: s.add_zeros("dec.pi.b", 1, cfg.modes)?,
        },
    };
    let handles = ModelHandles {
        enc_mlp,
        enc_gru,
        obs_attn,
        rel_gru,
        rel_const,
        pt_attn,
        pt_mlp,
        dec,
    };
    Ok((s, handles))
}

/// Everything the evaluator and trainer need from one scene.
#[derive(Debug, Clone)]
pub struct ScenePass {
    /// Influence probabilities, t_f x agents. All zeros when the tracing
    /// module is ablated or rolled back.
    pub probs: Array2<f64>,
    pub candidate_mask: Vec<bool>,
    /// Ground-truth one-hot labels, t_f x agents.
    pub labels: Array2<f64>,
    pub rollback: bool,
    /// Predicted mixture in world coordinates.
    pub mixture: LaplaceMixture,
    pub bundle: Option<LossBundle>,
    pub grads: Option<GradStore>,
}

/// Runs the full pipeline on one scene. Gradients require the loss.
pub fn run_scene(
    store: &ParamStore,
    h: &ModelHandles,
    cfg: &ModelConfig,
    scene: &Scene,
    want_loss: bool,
    want_grads: bool,
) -> Result<ScenePass> {
    scene.validate()?;
    let (norm, record) = normalize(scene);
    let n = norm.n_agents();
    let d = cfg.hidden;
    let target = norm.target_index;

    let feats = obs_features(&norm);
    let mut t = Tape::new(store);

    // Motion encoding: MLP + GRU over observed steps, holding the hidden
    // state of absent agents.
    let mut enc_steps: Vec<Var> = Vec::with_capacity(norm.t_h);
    let mut hidden = t.zeros(n, d);
    for step in 0..norm.t_h {
        let x_raw = Array2::from_shape_fn((n, cfg.input_dim), |(a, f)| feats[a][[step, f]]);
        let x = t.constant(x_raw);
        let x = crate::nn::mlp_forward(&mut t, x, &h.enc_mlp)?;
        let candidate_hidden = gru_step(&mut t, x, hidden, &h.enc_gru)?;
        let mask_col =
            Array2::from_shape_fn((n, 1), |(a, _)| if norm.presence[a][step] { 1.0 } else { 0.0 });
        let keep_col = mask_col.mapv(|v| 1.0 - v);
        let mvar = t.constant(mask_col);
        let kvar = t.constant(keep_col);
        let updated = t.mul_col(candidate_hidden, mvar);
        let held = t.mul_col(hidden, kvar);
        hidden = t.add(updated, held);
        enc_steps.push(hidden);
    }

    // Interaction aggregation across agents at each observed step.
    let mut int_steps: Vec<Var> = Vec::with_capacity(norm.t_h);
    for (step, &enc) in enc_steps.iter().enumerate() {
        let present: Vec<bool> = (0..n).map(|a| norm.presence[a][step]).collect();
        int_steps.push(self_attention_block(&mut t, enc, &present, &h.obs_attn)?);
    }

    // Each agent's final observed hidden state (post-interaction), taken at
    // its own last present step.
    let last_rows: Vec<Var> = (0..n)
        .map(|a| {
            let step = norm.last_observed_step(a).unwrap_or(0);
            t.gather_rows(int_steps[step], &[a])
        })
        .collect();
    let last_hidden = t.concat_rows(&last_rows);

    let rel = relation_encodings(&mut t, &h.rel_gru, h.rel_const, last_hidden, norm.t_f)?;
    let target_rows: Vec<Var> = rel
        .steps
        .iter()
        .map(|&s| t.gather_rows(s, &[target]))
        .collect();

    // Candidate set: base rule plus the optional threshold filter.
    let mut mask = base_candidates(&norm);
    if let Some(f) = cfg.filter {
        let geo = candidate_filter(&norm, f.d_max, f.fov_deg);
        for a in 0..n {
            mask[a] = mask[a] && geo[a];
        }
    }

    let labels = label_predecessors(&norm, &mask, cfg.label_metric);

    // Tracing module.
    let slot = d + 1;
    let (probs, step_probs_for_loss, rollback, agg_steps) = if cfg.pt_enabled {
        let target_obs_rows: Vec<Var> = int_steps
            .iter()
            .map(|&s| t.gather_rows(s, &[target]))
            .collect();
        let target_obs_seq = t.concat_rows(&target_obs_rows);
        let logits = influence_logits(
            &mut t,
            &h.pt_attn,
            &h.pt_mlp,
            target,
            target_obs_seq,
            &rel,
            cfg.single_vector_attention,
        )?;
        let dist = predecessor_distribution(&mut t, &logits, &mask)?;
        let agg = topk_aggregate(&mut t, &dist, &rel, cfg.k_top);
        (
            dist.probs.clone(),
            Some(dist),
            agg.selected.iter().all(|s| s.is_empty()),
            agg.step_vectors,
        )
    } else {
        let zeros: Vec<Var> = (0..norm.t_f).map(|_| t.zeros(1, cfg.k_top * slot)).collect();
        (Array2::zeros((norm.t_f, n)), None, true, zeros)
    };

    // Decode the target's future mixture.
    let h0 = t.gather_rows(last_hidden, &[target]);
    let (mixture_norm, nodes) = decode(
        &mut t,
        &h.dec,
        &target_rows,
        &agg_steps,
        h0,
        cfg.modes,
        cfg.elu_eps,
    )?;

    let mut bundle = None;
    let mut grads = None;
    if want_loss {
        let gt = norm.future().target_positions();
        let m_star = best_mode(&mixture_norm, &gt);
        let l_nll = laplace_nll(&mut t, &nodes, &gt, m_star);
        let targets = soft_targets(&mixture_norm, &gt, cfg.tau);
        let l_cls = cls_loss(&mut t, nodes.mode_probs, &targets);
        let l_pns = match &step_probs_for_loss {
            Some(dist) => pns_loss(&mut t, dist, &labels, cfg.binary_ce),
            None => t.zeros(1, 1),
        };
        let total = total_loss(&mut t, l_pns, l_cls, l_nll, cfg.lambda);
        bundle = Some(LossBundle {
            l_pns: t.scalar_value(l_pns),
            l_cls: t.scalar_value(l_cls),
            l_nll: t.scalar_value(l_nll),
            total: t.scalar_value(total),
        });
        if want_grads {
            grads = Some(t.backward(total));
        }
    }

    Ok(ScenePass {
        probs,
        candidate_mask: mask,
        labels,
        rollback,
        mixture: mixture_norm.translated(record.offset),
        bundle,
        grads,
    })
}

/// Serialized parameter archive with shapes and a format version.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn checkpoint_from(store: &ParamStore, cfg: &ModelConfig) -> Checkpoint {
    let params = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            ParamRecord {
                name: store.name(id).to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            }
        })
        .collect();
    Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: *cfg,
        params,
    }
}

pub fn save_checkpoint<W: Write>(writer: W, store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    serde_json::to_writer(writer, &checkpoint_from(store, cfg))?;
    Ok(())
}

pub fn save_checkpoint_file<P: AsRef<Path>>(
    path: P,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    save_checkpoint(std::io::BufWriter::new(file), store, cfg)
}

/// Restores a checkpoint, validating the format version and that every
/// parameter matches the shape demanded by the stored configuration.
pub fn load_checkpoint<R: Read>(reader: R) -> Result<(ParamStore, ModelHandles, ModelConfig)> {
    let ck: Checkpoint = serde_json::from_reader(reader)?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format version {}",
            ck.format_version
        )));
    }
    let mut shape_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (mut store, handles) = init_params(&ck.config, &mut shape_rng)?;
    if ck.params.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            ck.params.len(),
            store.len()
        )));
    }
    for rec in &ck.params {
        let id = store
            .id(&rec.name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", rec.name)))?;
        let expected = store.value(id).dim();
        if expected != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
            return Err(Error::Config(format!(
                "parameter `{}` has shape {}x{}, model expects {}x{}",
                rec.name, rec.rows, rec.cols, expected.0, expected.1
            )));
        }
        let arr = Array2::from_shape_vec((rec.rows, rec.cols), rec.data.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        *store.value_mut(id) = arr;
    }
    Ok((store, handles, ck.config))
}

pub fn load_checkpoint_file<P: AsRef<Path>>(
    path: P,
) -> Result<(ParamStore, ModelHandles, ModelConfig)> {
    let file = std::fs::File::open(path)?;
    load_checkpoint(std::io::BufReader::new(file))
}

use rand::SeedableRng;
