//! Training loop with early stopping, evaluation metrics, the top-K sweep
//! and attention export.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{clip_rating, BiasedMfParams};
use crate::data::{DatasetSplit, FeatureTables, Interaction};
use crate::model::{
    backward, forward, forward_batch, joint_loss, predict_scores, BatchNormStats, LossBreakdown, Mode,
    ModelConfig, ModelError, ModelShape, SainParams, Scores,
};
use crate::tensor::{adam_step, AdamState, Matrix};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("empty evaluation set")]
    EmptySet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay to embedding and latent-factor tables too.
    pub decay_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            lr: 1e-3,
            weight_decay: 1e-4,
            decay_embeddings: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Derive an independent seed for a named component.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a of the name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sain,
    Biasedmf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sain => "sain",
            ModelKind::Biasedmf => "biasedmf",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sain" => Ok(ModelKind::Sain),
            "biasedmf" => Ok(ModelKind::Biasedmf),
            other => Err(format!("unknown model kind {other:?} (expected sain or biasedmf)")),
        }
    }
}

/// A trained or initialized model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Sain {
        config: ModelConfig,
        params: SainParams,
        bn: BatchNormStats,
    },
    Biasedmf {
        params: BiasedMfParams,
    },
}

impl Model {
    /// Fresh parameters. `global_mean` is only used by BiasedMF.
    pub fn init(
        kind: ModelKind,
        shape: &ModelShape,
        config: &ModelConfig,
        global_mean: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match kind {
            ModelKind::Sain => Model::Sain {
                config: config.clone(),
                params: SainParams::init(shape, config, &mut rng)?,
                bn: BatchNormStats::new(config.dim),
            },
            ModelKind::Biasedmf => Model::Biasedmf {
                params: BiasedMfParams::init(
                    shape.num_users,
                    shape.num_items,
                    config.dim,
                    config.table_init,
                    global_mean,
                    &mut rng,
                ),
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Sain { .. } => ModelKind::Sain,
            Model::Biasedmf { .. } => ModelKind::Biasedmf,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            Model::Sain { params, .. } => params.tensors(),
            Model::Biasedmf { params } => params.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Model::Sain { params, .. } => params.tensors_mut(),
            Model::Biasedmf { params } => params.tensors_mut(),
        }
    }

    /// Eval-mode scores. BiasedMF has no content or preference score; those
    /// fields are NaN.
    pub fn scores(&self, features: &FeatureTables, pairs: &[(usize, usize)]) -> Result<Vec<Scores>, ModelError> {
        match self {
            Model::Sain { config, params, bn } => predict_scores(params, bn, features, pairs, config),
            Model::Biasedmf { params } => pairs
                .iter()
                .map(|&(u, i)| {
                    Ok(Scores {
                        content: f64::NAN,
                        preference: f64::NAN,
                        combined: params.score(u, i)?,
                    })
                })
                .collect(),
        }
    }

    /// Clipped combined score and, for SAIN, the user and item gate values.
    pub fn predict(
        &self,
        features: &FeatureTables,
        user: usize,
        item: usize,
    ) -> Result<(f64, Option<(f64, f64)>), ModelError> {
        match self {
            Model::Sain { config, params, bn } => {
                let t = forward(params, bn, features, user, item, config, Mode::eval())?;
                Ok((clip_rating(t.scores.combined), Some((t.gate_user.alpha, t.gate_item.alpha))))
            }
            Model::Biasedmf { params } => Ok((clip_rating(params.score(user, item)?), None)),
        }
    }
}

/// Names of tensors that hold per-entity or per-category rows.
fn is_table(kind: ModelKind, name: &str) -> bool {
    match kind {
        ModelKind::Sain => name.starts_with("embedding.") || name.starts_with("cf."),
        ModelKind::Biasedmf => true,
    }
}

/// Adam moments for every learnable tensor, aligned with `Model::tensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub states: Vec<AdamState>,
    /// Per-tensor weight-decay multiplier (0 or 1).
    decay: Vec<f64>,
}

impl Optimizer {
    pub fn new(model: &Model, decay_embeddings: bool) -> Self {
        let kind = model.kind();
        let tensors = model.tensors();
        Self {
            states: tensors.iter().map(|(_, m)| AdamState::for_param(m)).collect(),
            decay: tensors
                .iter()
                .map(|(name, _)| if !decay_embeddings && is_table(kind, name) { 0.0 } else { 1.0 })
                .collect(),
        }
    }

    pub fn with_states(model: &Model, decay_embeddings: bool, states: Vec<AdamState>) -> Self {
        let mut opt = Self::new(model, decay_embeddings);
        opt.states = states;
        opt
    }

    fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>, lr: f64, wd: f64) -> Result<(), ModelError> {
        for (((p, g), s), d) in params.into_iter().zip(grads).zip(&mut self.states).zip(&self.decay) {
            adam_step(p, g, s, lr, wd * d)?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training losses over the epoch; NaN where the model has no such score.
    pub loss_content: f64,
    pub loss_preference: f64,
    pub loss_combined: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_content,loss_preference,loss_combined,val_rmse,val_mae";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.loss_content, r.loss_preference, r.loss_combined, r.val_rmse, r.val_mae
        );
    }
    out
}

/// Result of a training run: the best-validation snapshot and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Optimizer,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

fn pairs_and_ratings(set: &[Interaction]) -> (Vec<(usize, usize)>, Vec<f64>) {
    set.iter().map(|i| ((i.user, i.item), i.rating)).unzip()
}

fn step_seed(dropout_seed: u64, step: u64) -> u64 {
    sub_seed(dropout_seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15), "step")
}

fn train_batch(
    model: &mut Model,
    opt: &mut Optimizer,
    features: &FeatureTables,
    batch: &[Interaction],
    dropout_seed: u64,
    tc: &TrainConfig,
) -> Result<LossBreakdown, ModelError> {
    let (pairs, ratings) = pairs_and_ratings(batch);
    match model {
        Model::Sain { config, params, bn } => {
            let trace = forward_batch(params, bn, features, &pairs, config, Mode::train(dropout_seed))?;
            let loss = joint_loss(&trace.scores(), &ratings, config.loss_weights)?;
            if !loss.total.is_finite() {
                return Ok(loss);
            }
            let grads = backward(&trace, &ratings, params, config)?;
            let g: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, m)| m).collect();
            opt.step(params.tensors_mut(), g, tc.lr, tc.weight_decay)?;
            bn.update(&trace.bn_mean, &trace.bn_var, trace.positions(), config.batch_norm_momentum);
            Ok(loss)
        }
        Model::Biasedmf { params } => {
            let (mse, grads) = params.loss_and_gradient(&pairs, &ratings)?;
            let loss = LossBreakdown {
                content: f64::NAN,
                preference: f64::NAN,
                combined: mse,
                total: mse,
            };
            if !mse.is_finite() {
                return Ok(loss);
            }
            let g: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, m)| m).collect();
            opt.step(params.tensors_mut(), g, tc.lr, tc.weight_decay)?;
            Ok(loss)
        }
    }
}

/// Train `model` on `split.train`, selecting the epoch with the lowest
/// validation RMSE of the clipped combined score.
pub fn train_model(
    mut model: Model,
    features: &FeatureTables,
    split: &DatasetSplit,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mut opt = Optimizer::new(&model, tc.decay_embeddings);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(tc.seed, "shuffle"));
    let dropout_seed = sub_seed(tc.seed, "dropout");
    let mut order = split.train.clone();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model, Optimizer)> = None;
    let mut stale = 0;
    let mut step = 0u64;

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 3];
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let loss = train_batch(&mut model, &mut opt, features, batch, step_seed(dropout_seed, step), tc)?;
            step += 1;
            if !loss.total.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b + 1 });
            }
            let w = batch.len() as f64;
            sums[0] += w * loss.content;
            sums[1] += w * loss.preference;
            sums[2] += w * loss.combined;
        }
        let n = order.len() as f64;
        let val = evaluate(&model, features, &split.validation)?;
        log.push(EpochRecord {
            epoch,
            loss_content: sums[0] / n,
            loss_preference: sums[1] / n,
            loss_combined: sums[2] / n,
            val_rmse: val.rmse,
            val_mae: val.mae,
        });
        let improved = best.as_ref().is_none_or(|(r, ..)| val.rmse < *r);
        if improved {
            best = Some((val.rmse, epoch, model.clone(), opt.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        optimizer,
        best_epoch,
        log,
    })
}

/// Convenience wrapper: initialize from the split and train.
pub fn train(
    kind: ModelKind,
    shape: &ModelShape,
    features: &FeatureTables,
    split: &DatasetSplit,
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mean = split.train.iter().map(|i| i.rating).sum::<f64>() / split.train.len() as f64;
    let model = Model::init(kind, shape, config, mean, sub_seed(tc.seed, "init"))?;
    train_model(model, features, split, tc)
}

/// RMSE and MAE of predictions against targets.
pub fn rmse_mae(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64), TrainError> {
    if predictions.is_empty() {
        return Err(TrainError::EmptySet);
    }
    if predictions.len() != targets.len() {
        return Err(ModelError::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        ))
        .into());
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in predictions.iter().zip(targets) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
    }
    let n = predictions.len() as f64;
    Ok(((se / n).sqrt(), ae / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metrics of the clipped combined score.
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    /// Unclipped per-score RMSE; `None` for models without that score.
    pub content_rmse: Option<f64>,
    pub preference_rmse: Option<f64>,
    pub combined_rmse: f64,
}

pub fn evaluate(model: &Model, features: &FeatureTables, set: &[Interaction]) -> Result<EvalReport, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let (pairs, ratings) = pairs_and_ratings(set);
    let scores = model.scores(features, &pairs)?;
    let clipped: Vec<f64> = scores.iter().map(|s| clip_rating(s.combined)).collect();
    let (rmse, mae) = rmse_mae(&clipped, &ratings)?;
    let breakdown = |f: fn(&Scores) -> f64| -> Result<Option<f64>, TrainError> {
        let v: Vec<f64> = scores.iter().map(f).collect();
        if v.iter().any(|x| x.is_nan()) {
            return Ok(None);
        }
        Ok(Some(rmse_mae(&v, &ratings)?.0))
    };
    Ok(EvalReport {
        rmse,
        mae,
        n: set.len(),
        content_rmse: breakdown(|s| s.content)?,
        preference_rmse: breakdown(|s| s.preference)?,
        combined_rmse: breakdown(|s| s.combined)?.unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    /// Mean over repeats.
    pub test_rmse: f64,
    pub test_mae: f64,
    /// Per-repeat test RMSE, in seed order.
    pub runs: Vec<f64>,
}

/// Train one SAIN model per K and report test metrics. Repeat `r` uses
/// training seed `seed + r`; the split is shared.
pub fn sweep_top_k(
    shape: &ModelShape,
    features: &FeatureTables,
    split: &DatasetSplit,
    config: &ModelConfig,
    tc: &TrainConfig,
    ks: &[usize],
    repeats: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    if ks.contains(&0) {
        return Err(TrainError::Config("k values must be at least 1".into()));
    }
    let repeats = repeats.max(1);
    ks.iter()
        .map(|&k| {
            let cfg = ModelConfig {
                top_k: k,
                ..config.clone()
            };
            let mut runs = Vec::with_capacity(repeats);
            let mut maes = Vec::with_capacity(repeats);
            for r in 0..repeats {
                let t = TrainConfig {
                    seed: tc.seed.wrapping_add(r as u64),
                    ..tc.clone()
                };
                let out = train(ModelKind::Sain, shape, features, split, &cfg, &t)?;
                let rep = evaluate(&out.model, features, &split.test)?;
                runs.push(rep.rmse);
                maes.push(rep.mae);
            }
            let n = repeats as f64;
            Ok(SweepRow {
                k,
                test_rmse: runs.iter().sum::<f64>() / n,
                test_mae: maes.iter().sum::<f64>() / n,
                runs,
            })
        })
        .collect()
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// `k,test_rmse,test_mae`, plus `test_rmse_std` when rows were repeated.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let repeated = rows.iter().any(|r| r.runs.len() > 1);
    let mut out = String::from("k,test_rmse,test_mae");
    if repeated {
        out.push_str(",test_rmse_std");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.k, r.test_rmse, r.test_mae);
        if repeated {
            let _ = write!(out, ",{}", std_dev(&r.runs));
        }
        out.push('\n');
    }
    out
}

/// Post-softmax, pre-filter attention of every head for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// Field names in sequence order.
    pub labels: Vec<String>,
    pub heads: Vec<Matrix>,
}

pub fn export_attention(
    model: &Model,
    features: &FeatureTables,
    user: usize,
    item: usize,
) -> Result<AttentionMaps, ModelError> {
    match model {
        Model::Sain { config, params, bn } => {
            let t = forward(params, bn, features, user, item, config, Mode::eval())?;
            Ok(AttentionMaps {
                labels: params.field_names.clone(),
                heads: t.heads.into_iter().map(|h| h.weights).collect(),
            })
        }
        Model::Biasedmf { .. } => Err(ModelError::Config("BiasedMF has no attention".into())),
    }
}

/// Square CSV with a labeled header row and a label column.
pub fn attention_csv(labels: &[String], weights: &Matrix) -> String {
    let mut out = String::from("field");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (r, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in weights.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
