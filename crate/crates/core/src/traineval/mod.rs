//! Class-weighted training with early stopping, cross-validation and evaluation.

mod metrics;
mod report;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{class_weights, FoldSplit, Role};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::models::{
    batch_tensors, forward_batch, predict, BatchTensors, ModelConfig, ModelKind, ModelParams, ParamVars, StayInput,
};
use crate::ndcore::layers::l2_penalty_tape;
use crate::ndcore::optim::AmsGrad;
use crate::ndcore::tape::{BatchStats, BCE_EPS};
use crate::ndcore::{Mode, Tape, Var};

pub use metrics::{
    auprc, auroc, incomplete_beta, mean, paired_ttest_onetailed, sample_sd, significance_marker, t_cdf, t_sf, TTest,
};
pub use report::{build_report, CellSummary, Comparison, FoldMetrics, Metric, MetricsReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub k: usize,
    /// Batch size used for evaluation passes.
    pub eval_batch_size: usize,
}

impl TrainConfig {
    /// Defaults for each model: the note models use batches of 16 and a
    /// stepped learning rate, the time-series baseline batches of 64 and a
    /// constant rate.
    pub fn for_model(kind: ModelKind) -> Self {
        let hcr = kind.uses_notes();
        TrainConfig {
            epochs: 100,
            batch_size: if hcr { 16 } else { 64 },
            lr: 1e-3,
            lr_drops: if hcr { vec![10, 50, 90] } else { Vec::new() },
            lr_factor: 0.1,
            patience: 10,
            seed: 0,
            k: 5,
            eval_batch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_factor > 0.0) {
            return Err(Error::Config("learning rate and its decay factor must be positive".into()));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) || self.lr_drops.contains(&0) {
            return Err(Error::Config("lr_drops must be strictly increasing epochs >= 1".into()));
        }
        if self.k < 3 {
            return Err(Error::Config(format!("k must be at least 3, got {}", self.k)));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drops.iter().filter(|d| **d <= epoch).count();
    cfg.lr * cfg.lr_factor.powi(drops as i32)
}

/// `-[w_pos·y·ln p + w_neg·(1-y)·ln(1-p)]` with `p` clamped away from 0 and 1.
pub fn weighted_bce(p: f64, y: bool, w_pos: f64, w_neg: f64) -> f64 {
    let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y {
        -w_pos * q.ln()
    } else {
        -w_neg * (1.0 - q).ln()
    }
}

/// Mean weighted cross-entropy; `weights` is `(w_neg, w_pos)`.
pub fn mean_weighted_bce(probs: &[f64], labels: &[bool], weights: (f64, f64)) -> f64 {
    let total: f64 = probs.iter().zip(labels).map(|(p, y)| weighted_bce(*p, *y, weights.1, weights.0)).sum();
    total / probs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted cross-entropy over training batches (penalty excluded).
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// `(w_neg, w_pos)` from the training stays.
    pub class_weights: (f64, f64),
}

/// Training objective of one batch on `tape`: weighted cross-entropy plus the
/// L2 penalties of every decay group.
pub struct BatchObjective {
    pub objective: Var,
    pub data_loss: Var,
    pub bn_updates: Vec<(String, BatchStats)>,
}

pub fn batch_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    tensors: &BatchTensors,
    labels: &[bool],
    weights: (f64, f64),
    rng: &mut R,
) -> Result<BatchObjective> {
    let out = forward_batch(tape, vars, params, tensors, Mode::Train, rng)?;
    let targets: Vec<f64> = labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = labels.iter().map(|l| if *l { weights.1 } else { weights.0 }).collect();
    let data_loss = tape.weighted_bce(out.probs, &targets, &w)?;
    let mut objective = data_loss;
    let mut by_lambda: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for (name, lambda) in params.decay_groups() {
        by_lambda.entry(lambda.to_bits()).or_default().push(vars.get(&name)?);
    }
    for (bits, group) in by_lambda {
        if let Some(pen) = l2_penalty_tape(tape, &group, f64::from_bits(bits))? {
            objective = tape.add(objective, pen)?;
        }
    }
    Ok(BatchObjective { objective, data_loss, bn_updates: out.bn_updates })
}

/// One optimizer step on a batch. Returns the weighted cross-entropy before the step.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut AmsGrad,
    batch: &[&StayInput],
    weights: (f64, f64),
    emb: Option<&EmbeddingMatrix>,
    rng: &mut R,
) -> Result<f64> {
    let tensors = batch_tensors(params.kind, &params.config, batch, emb)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let labels: Vec<bool> = batch.iter().map(|s| s.label).collect();
    let obj = batch_objective(&mut tape, &vars, params, &tensors, &labels, weights, rng)?;
    let loss = tape.value(obj.data_loss).item();
    if !loss.is_finite() {
        return Err(Error::CorruptData(format!("non-finite training loss {loss}")));
    }
    let grads = tape.backward(obj.objective)?;
    let grads = vars.gradients(&tape, &grads);
    opt.step(params.tensors_mut(), &grads)?;
    params.apply_bn_updates(&obj.bn_updates)?;
    Ok(loss)
}

/// Shuffled batches of equal note count.
fn make_batches<'a, R: Rng + ?Sized>(
    stays: &[&'a StayInput],
    kind: ModelKind,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<&'a StayInput>> {
    let mut buckets: BTreeMap<usize, Vec<&StayInput>> = BTreeMap::new();
    for s in stays {
        let key = if kind.uses_notes() { s.n_notes() } else { 0 };
        buckets.entry(key).or_default().push(*s);
    }
    let mut batches = Vec::new();
    for mut bucket in buckets.into_values() {
        bucket.shuffle(rng);
        batches.extend(bucket.chunks(batch_size).map(<[&StayInput]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains one model on `train`, early-stopping on the weighted validation loss
/// and restoring the best epoch's weights. Class weights come from `train` only.
pub fn train_model(
    kind: ModelKind,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[&StayInput],
    val: &[&StayInput],
    emb: Option<&EmbeddingMatrix>,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let labels: Vec<bool> = train.iter().map(|s| s.label).collect();
    let weights = class_weights(&labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = if model_cfg.train_embeddings && kind.uses_notes() {
        let emb = emb.ok_or_else(|| Error::MissingModality("embedding training needs pretrained vectors".into()))?;
        let cfg = ModelConfig { vocab_size: emb.rows(), ..model_cfg.clone() };
        let mut p = ModelParams::init(kind, &cfg, rng.gen())?;
        p.load_embeddings(emb)?;
        p
    } else {
        ModelParams::init(kind, model_cfg, rng.gen())?
    };
    let mut opt = AmsGrad::new(cfg.lr);
    let val_labels: Vec<bool> = val.iter().map(|s| s.label).collect();

    let mut history = Vec::new();
    let mut best = (0usize, f64::INFINITY, params.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        opt.lr = lr_at_epoch(cfg, epoch);
        let mut total = 0.0;
        for batch in make_batches(train, kind, cfg.batch_size, &mut rng) {
            total += train_step(&mut params, &mut opt, &batch, weights, emb, &mut rng)? * batch.len() as f64;
        }
        let val_probs = predict(&params, val, emb, cfg.eval_batch_size)?;
        let val_loss = mean_weighted_bce(&val_probs, &val_labels, weights);
        history.push(EpochRecord { epoch, lr: opt.lr, train_loss: total / train.len() as f64, val_loss });
        if val_loss < best.1 {
            best = (epoch, val_loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, params) = best;
    Ok(TrainedModel { params, history, best_epoch, best_val_loss, class_weights: weights })
}

/// A trained fold with its held-out predictions.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: TrainedModel,
    pub test_ids: Vec<u64>,
    pub test_probs: Vec<f64>,
    pub metrics: FoldMetrics,
}

/// Per-fold seed derived from the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains and evaluates one fold.
pub fn run_fold(
    kind: ModelKind,
    window: u32,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stays: &[StayInput],
    split: &FoldSplit,
    emb: Option<&EmbeddingMatrix>,
) -> Result<FoldOutcome> {
    let mut by_role: HashMap<Role, Vec<&StayInput>> = HashMap::new();
    for s in stays {
        let role = split
            .roles
            .get(&s.hadm_id)
            .ok_or_else(|| Error::Config(format!("stay {} missing from fold {}", s.hadm_id, split.fold)))?;
        by_role.entry(*role).or_default().push(s);
    }
    let get = |r: Role| by_role.get(&r).cloned().unwrap_or_default();
    let (train, val, test) = (get(Role::Train), get(Role::Val), get(Role::Test));
    let model =
        train_model(kind, model_cfg, cfg, &train, &val, emb, fold_seed(cfg.seed, split.fold)).map_err(|e| match e {
            Error::SingleClass(msg) => {
                Error::SingleClass(format!("fold {}: training labels are single-class ({msg})", split.fold))
            }
            other => other,
        })?;
    let test_probs = predict(&model.params, &test, emb, cfg.eval_batch_size)?;
    let test_labels: Vec<bool> = test.iter().map(|s| s.label).collect();
    let metrics = FoldMetrics {
        model: kind,
        window,
        fold: split.fold,
        auroc: auroc(&test_probs, &test_labels)?,
        auprc: auprc(&test_probs, &test_labels)?,
    };
    Ok(FoldOutcome { fold: split.fold, model, test_ids: test.iter().map(|s| s.hadm_id).collect(), test_probs, metrics })
}

/// Runs every fold, `jobs` at a time. Each fold is seeded independently, so
/// results do not depend on `jobs`.
pub fn cross_validate(
    kind: ModelKind,
    window: u32,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stays: &[StayInput],
    folds: &[FoldSplit],
    emb: Option<&EmbeddingMatrix>,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| folds.par_iter().map(|f| run_fold(kind, window, model_cfg, cfg, stays, f, emb)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((weighted_bce(0.5, true, 1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((weighted_bce(0.9, false, 1.0, 2.0) - 4.60517).abs() < 1e-5);
        assert!((weighted_bce(0.9, false, 1.0, 2.0) + 2.0 * 0.1f64.ln()).abs() < 1e-12);
        let plain = -(0.3f64.ln());
        assert!((weighted_bce(0.3, true, 1.0, 1.0) - plain).abs() < 1e-15);
        assert!(weighted_bce(0.0, true, 1.0, 1.0).is_finite());
        assert!(weighted_bce(1.0, false, 1.0, 1.0).is_finite());
    }

    #[test]
    fn lr_schedule() {
        let hcr = TrainConfig::for_model(ModelKind::NotesHcr);
        assert_eq!(lr_at_epoch(&hcr, 1), 1e-3);
        assert_eq!(lr_at_epoch(&hcr, 9), 1e-3);
        assert!((lr_at_epoch(&hcr, 10) - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&hcr, 49) - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&hcr, 50) - 1e-5).abs() < 1e-19);
        assert!((lr_at_epoch(&hcr, 100) - 1e-6).abs() < 1e-20);
        let cts = TrainConfig::for_model(ModelKind::CtsRnn);
        assert!((1..=100).all(|e| lr_at_epoch(&cts, e) == 1e-3));
        assert_eq!((hcr.batch_size, cts.batch_size), (16, 64));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::for_model(ModelKind::MmHcr);
        assert!(c.validate().is_ok());
        c.lr_drops = vec![50, 10];
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..TrainConfig::for_model(ModelKind::MmHcr) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fold_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..5).map(|f| fold_seed(7, f)).collect();
        assert_eq!(s.len(), 5);
    }
}
