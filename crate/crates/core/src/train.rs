//! Training loop with adaptive-moment gradient descent, deterministic given
//! (seed, config, data), plus the ablation runner over the study axes.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::metrics::{evaluate, made_k, run_passes, EvalReport};
use crate::model::{init_params, run_scene, FilterParams, ModelConfig, ModelHandles};
use crate::nn::ParamStore;
use crate::predecessor::Metric;
use crate::scene::Scene;

/// Full training configuration. Serializes flat so config files stay
/// diff-able key=value documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub k_top: usize,
    pub modes: usize,
    pub hidden: usize,
    pub metric: Metric,
    pub pt_enabled: bool,
    pub binary_ce: bool,
    pub single_vector_attention: bool,
    /// Candidate thresholds; both must be set to enable the filter.
    pub filter_d_max: Option<f64>,
    pub filter_fov_deg: Option<f64>,
    /// Fraction of training scenes held out for validation.
    pub val_fraction: f64,
    /// Early-stop patience in epochs without validation improvement.
    pub patience: usize,
    pub elu_eps: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            lambda: 0.5,
            k_top: 2,
            modes: 20,
            hidden: 64,
            metric: Metric::L2,
            pt_enabled: true,
            binary_ce: true,
            single_vector_attention: false,
            filter_d_max: None,
            filter_fov_deg: None,
            val_fraction: 0.1,
            patience: 5,
            elu_eps: 1e-3,
            tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn filter(&self) -> Option<FilterParams> {
        match (self.filter_d_max, self.filter_fov_deg) {
            (Some(d_max), Some(fov_deg)) => Some(FilterParams { d_max, fov_deg }),
            _ => None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            input_dim: crate::scene::INPUT_FEATURES,
            k_top: self.k_top,
            modes: self.modes,
            lambda: self.lambda,
            pt_enabled: self.pt_enabled,
            binary_ce: self.binary_ce,
            single_vector_attention: self.single_vector_attention,
            label_metric: self.metric,
            filter: self.filter(),
            elu_eps: self.elu_eps,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.model_config().validate()
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .ids()
            .map(|id| Array2::zeros(params.value(id).raw_dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One optimizer step over the gradient accumulators, with bias correction.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = params.grad(id).clone();
        state.m[i] = &state.m[i] * cfg.beta1 + &g * (1.0 - cfg.beta1);
        state.v[i] = &state.v[i] * cfg.beta2 + &(&g * &g) * (1.0 - cfg.beta2);
        let m_hat = &state.m[i] / bc1;
        let v_hat = &state.v[i] / bc2;
        let denom = v_hat.mapv(f64::sqrt) + cfg.adam_eps;
        let update = m_hat / denom * cfg.lr;
        *params.value_mut(id) -= &update;
    }
}

/// Per-epoch mean losses over the training scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_pns: f64,
    pub l_cls: f64,
    pub l_nll: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub store: ParamStore,
    pub handles: ModelHandles,
    pub model_cfg: ModelConfig,
    pub curve: Vec<EpochLosses>,
    /// Epoch whose parameters are checkpointed (best validation mADE).
    pub best_epoch: usize,
    pub val_made: Vec<Option<f64>>,
}

/// Trains the model. Deterministic: identical (config, scenes) reproduce
/// bit-identical loss curves and parameters.
pub fn train(cfg: &TrainConfig, scenes: &[Scene]) -> Result<TrainResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model_cfg = cfg.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut store, handles) = init_params(&model_cfg, &mut rng)?;
    let mut adam = AdamState::new(&store);

    // Deterministic split: scenes in id order, the tail held out for
    // validation.
    let mut ordered: Vec<&Scene> = scenes.iter().collect();
    ordered.sort_by_key(|s| s.id);
    let n_val = (ordered.len() as f64 * cfg.val_fraction).floor() as usize;
    let (train_scenes, val_scenes) = ordered.split_at(ordered.len() - n_val);
    if train_scenes.is_empty() {
        return Err(Error::Config("no scenes left after the validation split".into()));
    }
    let eval_k = cfg.modes.min(5);

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut val_made_history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0usize;

    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let passes: Result<Vec<_>> = batch
                .par_iter()
                .map(|&i| run_scene(&store, &handles, &model_cfg, train_scenes[i], true, true))
                .collect();
            let passes = passes?;
            store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for pass in &passes {
                let bundle = pass.bundle.expect("loss requested");
                if !bundle.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        value: bundle.total,
                    });
                }
                sums.0 += bundle.l_pns;
                sums.1 += bundle.l_cls;
                sums.2 += bundle.l_nll;
                sums.3 += bundle.total;
                store.accumulate(pass.grads.as_ref().expect("gradients requested"), scale);
            }
            adam_step(&mut store, &mut adam, cfg);
        }
        let n = train_scenes.len() as f64;
        curve.push(EpochLosses {
            epoch,
            l_pns: sums.0 / n,
            l_cls: sums.1 / n,
            l_nll: sums.2 / n,
            total: sums.3 / n,
        });

        // Validation mADE for checkpoint selection and early stopping; the
        // mean training loss stands in when no scenes are held out.
        let score = if val_scenes.is_empty() {
            sums.3 / n
        } else {
            let passes = run_passes(
                &store,
                &handles,
                &model_cfg,
                &val_scenes.iter().map(|s| (*s).clone()).collect::<Vec<_>>(),
            )?;
            let mut total = 0.0;
            for (id, pass) in &passes {
                let scene = val_scenes.iter().find(|s| s.id == *id).expect("known id");
                let gt = scene.future().target_positions();
                total += made_k(&pass.mixture, &gt, eval_k)?;
            }
            total / passes.len() as f64
        };
        val_made_history.push(if val_scenes.is_empty() { None } else { Some(score) });

        let improved = match &best {
            None => true,
            Some((_, best_score, _)) => score < *best_score,
        };
        if improved {
            best = Some((epoch, score, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, _, best_store) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        store: best_store,
        handles,
        model_cfg,
        curve,
        best_epoch,
        val_made: val_made_history,
    })
}

/// Writes the loss curve as CSV: epoch, l_pns, l_cls, l_nll, total.
pub fn write_loss_curve_csv<W: Write>(mut w: W, curve: &[EpochLosses]) -> Result<()> {
    writeln!(w, "epoch,l_pns,l_cls,l_nll,total")?;
    for row in curve {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.epoch, row.l_pns, row.l_cls, row.l_nll, row.total
        )?;
    }
    Ok(())
}

/// Ablation study axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Tracing module on/off.
    Pt,
    /// Aggregated predecessor count K in {1, 2, 3}.
    K,
    /// Labeling metric L2 vs L1.
    Metric,
    /// Loss weight in {0.1, 0.5, 1.0}.
    Lambda,
    /// Candidate threshold filter off/on.
    Filter,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pt" => Ok(AblationAxis::Pt),
            "k" => Ok(AblationAxis::K),
            "metric" => Ok(AblationAxis::Metric),
            "lambda" => Ok(AblationAxis::Lambda),
            "filter" => Ok(AblationAxis::Filter),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub report: EvalReport,
}

/// Trains one variant per axis setting under identical seeds and budget and
/// evaluates each on the held-out scenes.
pub fn ablation_run(
    base: &TrainConfig,
    axes: &[AblationAxis],
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    ks: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut variants: Vec<(String, String, TrainConfig)> = Vec::new();
    for axis in axes {
        match axis {
            AblationAxis::Pt => {
                for on in [true, false] {
                    let mut cfg = *base;
                    cfg.pt_enabled = on;
                    variants.push((
                        "pt".into(),
                        if on { "on".into() } else { "off".into() },
                        cfg,
                    ));
                }
            }
            AblationAxis::K => {
                for k in [1usize, 2, 3] {
                    let mut cfg = *base;
                    cfg.k_top = k;
                    variants.push(("k".into(), k.to_string(), cfg));
                }
            }
            AblationAxis::Metric => {
                for metric in [Metric::L2, Metric::L1] {
                    let mut cfg = *base;
                    cfg.metric = metric;
                    variants.push(("metric".into(), format!("{metric:?}").to_lowercase(), cfg));
                }
            }
            AblationAxis::Lambda => {
                for lambda in [0.1, 0.5, 1.0] {
                    let mut cfg = *base;
                    cfg.lambda = lambda;
                    variants.push(("lambda".into(), format!("{lambda}"), cfg));
                }
            }
            AblationAxis::Filter => {
                for on in [false, true] {
                    let mut cfg = *base;
                    if on {
                        let f = FilterParams::default();
                        cfg.filter_d_max = Some(f.d_max);
                        cfg.filter_fov_deg = Some(f.fov_deg);
                    } else {
                        cfg.filter_d_max = None;
                        cfg.filter_fov_deg = None;
                    }
                    variants.push((
                        "filter".into(),
                        if on { "on".into() } else { "off".into() },
                        cfg,
                    ));
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(variants.len());
    for (axis, variant, cfg) in variants {
        let result = train(&cfg, train_scenes)?;
        let report = evaluate(
            &result.store,
            &result.handles,
            &result.model_cfg,
            test_scenes,
            ks,
        )?;
        rows.push(AblationRow {
            axis,
            variant,
            report,
        });
    }
    Ok(rows)
}

/// Renders ablation rows as an aligned-column table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.report.per_k.iter().map(|k| k.k).collect())
        .unwrap_or_default();
    out.push_str(&format!("{:<10} {:<10}", "axis", "variant"));
    for k in &ks {
        out.push_str(&format!(" {:>12}", format!("mADE_{k}")));
        out.push_str(&format!(" {:>12}", format!("mFDE_{k}")));
    }
    out.push_str(&format!(" {:>10} {:>10}\n", "pred_acc", "empty"));
    for row in rows {
        out.push_str(&format!("{:<10} {:<10}", row.axis, row.variant));
        for k in &row.report.per_k {
            out.push_str(&format!(" {:>12.4} {:>12.4}", k.made, k.mfde));
        }
        match row.report.predecessor_top1 {
            Some(acc) => out.push_str(&format!(" {:>10.4}", acc)),
            None => out.push_str(&format!(" {:>10}", "n/a")),
        }
        out.push_str(&format!(" {:>10.4}\n", row.report.empty_rate));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.5, -2.0]]).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        store.zero_grads();
        adam_step(&mut store, &mut state, &cfg);
        assert_eq!(store.value(id), &array![[1.5, -2.0]]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, 1.0]]).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        store.zero_grads();
        store.grad_mut(id)[[0, 0]] = 3.0;
        store.grad_mut(id)[[0, 1]] = -0.7;
        adam_step(&mut store, &mut state, &cfg);
        // First bias-corrected step moves by ~lr against the gradient sign.
        let v = store.value(id);
        assert!((v[[0, 0]] - (1.0 - cfg.lr)).abs() < 1e-6);
        assert!((v[[0, 1]] - (1.0 + cfg.lr)).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // Closed-form optimum oracle: f(x) = sum (x - c)^2 has minimum at c.
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::zeros((1, 3))).unwrap();
        let target = array![[0.3, -0.7, 1.1]];
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut f = f64::INFINITY;
        for _ in 0..2000 {
            store.zero_grads();
            let x = store.value(id).clone();
            let diff = &x - &target;
            f = diff.iter().map(|d| d * d).sum();
            *store.grad_mut(id) = &diff * 2.0;
            adam_step(&mut store, &mut state, &cfg);
        }
        assert!(f < 1e-6, "quadratic bowl should converge, got {f}");
    }
}
