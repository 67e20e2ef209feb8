//! Batched forward pass, joint loss and exact reverse-mode gradients.
//!
//! Pipeline per example: embed → H attention heads → concat → batch norm →
//! dropout → residual add → ReLU → per-tower aggregation → integration gates
//! → content / preference / combined dot-product scores.
//!
//! Batch norm couples examples through its batch statistics, so forward and
//! backward run in phases: per-example work is parallel, reductions over the
//! batch are sequential in example order. Results do not depend on the
//! number of threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    aggregate_backward, aggregate_entities, attention_head, attention_head_backward, embed_pair,
    embed_pair_backward, integration_gate, integration_gate_backward, score_content, score_preference,
    GateOutput, HeadTrace,
};
use super::params::{BatchNormStats, SainParams};
use super::{ModelConfig, ModelError};
use crate::data::{EntityFeatures, FeatureTables};
use crate::tensor::{axpy, dot, Matrix};

/// Examples per parallel work unit. Fixed so reductions are reproducible.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with the running statistics.
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub batch_norm: BatchNormMode,
    /// Seed of the dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            batch_norm: BatchNormMode::Running,
            dropout_seed: None,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            batch_norm: BatchNormMode::Batch,
            dropout_seed: Some(dropout_seed),
        }
    }

    pub fn is_eval(&self) -> bool {
        *self == Self::eval()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub content: f64,
    pub preference: f64,
    pub combined: f64,
}

impl Scores {
    pub fn as_array(&self) -> [f64; 3] {
        [self.content, self.preference, self.combined]
    }
}

/// Everything one example's forward pass produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub user: usize,
    pub item: usize,
    pub user_features: EntityFeatures,
    pub item_features: EntityFeatures,
    /// Embedded feature sequence, `(m + n) × d`.
    pub x: Matrix,
    pub heads: Vec<HeadTrace>,
    /// Concatenated head outputs.
    pub concat: Matrix,
    /// Batch-normalized activations before scale and shift.
    pub normalized: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); `None` when off.
    pub dropout_mask: Option<Matrix>,
    pub pre_activation: Matrix,
    /// Post-ReLU sequence.
    pub xbar: Matrix,
    pub content_user: Vec<f64>,
    pub content_item: Vec<f64>,
    pub gate_user: GateOutput,
    pub gate_item: GateOutput,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub examples: Vec<ForwardTrace>,
    pub mode: Mode,
    /// Statistics used for normalization (batch or running).
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    pub bn_inv_std: Vec<f64>,
}

impl BatchTrace {
    pub fn scores(&self) -> Vec<Scores> {
        self.examples.iter().map(|t| t.scores).collect()
    }

    /// Positions normalized together: batch size × sequence length.
    pub fn positions(&self) -> usize {
        self.examples.iter().map(|t| t.x.rows()).sum()
    }
}

struct Partial {
    user: usize,
    item: usize,
    user_features: EntityFeatures,
    item_features: EntityFeatures,
    x: Matrix,
    heads: Vec<HeadTrace>,
    concat: Matrix,
}

fn check_ids(features: &FeatureTables, user: usize, item: usize) -> Result<(), ModelError> {
    if user >= features.users.len() {
        return Err(ModelError::UnknownEntity(format!("user index {user}")));
    }
    if item >= features.items.len() {
        return Err(ModelError::UnknownEntity(format!("item index {item}")));
    }
    Ok(())
}

fn dropout_masks(seed: u64, count: usize, rows: usize, cols: usize, rate: f64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..count)
        .map(|_| Matrix::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < rate { 0.0 } else { keep }))
        .collect()
}

/// Forward a batch of (user, item) index pairs.
pub fn forward_batch(
    params: &SainParams,
    bn_stats: &BatchNormStats,
    features: &FeatureTables,
    pairs: &[(usize, usize)],
    config: &ModelConfig,
    mode: Mode,
) -> Result<BatchTrace, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let d = params.dim();
    let dh = d / params.heads.len();

    let partials: Vec<Partial> = pairs
        .par_iter()
        .map(|&(user, item)| {
            check_ids(features, user, item)?;
            let x = embed_pair(&features.users[user], &features.items[item], params)?;
            let heads = params
                .heads
                .iter()
                .map(|h| attention_head(&x, h, config.top_k, config.renormalize_topk))
                .collect::<Result<Vec<_>, _>>()?;
            let mut concat = Matrix::zeros(x.rows(), d);
            for (h, trace) in heads.iter().enumerate() {
                for i in 0..x.rows() {
                    concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(trace.output.row(i));
                }
            }
            Ok(Partial {
                user,
                item,
                user_features: features.users[user].clone(),
                item_features: features.items[item].clone(),
                x,
                heads,
                concat,
            })
        })
        .collect::<Result<_, ModelError>>()?;

    let (bn_mean, bn_var) = match mode.batch_norm {
        BatchNormMode::Running => (bn_stats.mean.clone(), bn_stats.var.clone()),
        BatchNormMode::Batch => {
            let count = partials.iter().map(|p| p.concat.rows()).sum::<usize>() as f64;
            let mut mean = vec![0.0; d];
            for p in &partials {
                for i in 0..p.concat.rows() {
                    axpy(1.0, p.concat.row(i), &mut mean);
                }
            }
            mean.iter_mut().for_each(|v| *v /= count);
            let mut var = vec![0.0; d];
            for p in &partials {
                for i in 0..p.concat.rows() {
                    for (c, v) in p.concat.row(i).iter().enumerate() {
                        var[c] += (v - mean[c]) * (v - mean[c]);
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        }
    };
    let bn_inv_std: Vec<f64> = bn_var
        .iter()
        .map(|v| 1.0 / (v + config.batch_norm_eps).sqrt())
        .collect();

    let masks = match mode.dropout_seed {
        Some(seed) if config.dropout > 0.0 => {
            let len = partials[0].x.rows();
            Some(dropout_masks(seed, partials.len(), len, d, config.dropout))
        }
        _ => None,
    };

    let examples: Vec<ForwardTrace> = partials
        .into_par_iter()
        .enumerate()
        .map(|(b, p)| {
            let len = p.x.rows();
            let mut normalized = Matrix::zeros(len, d);
            let mut pre_activation = Matrix::zeros(len, d);
            let mut xbar = Matrix::zeros(len, d);
            let mask = masks.as_ref().map(|m| m[b].clone());
            for i in 0..len {
                for c in 0..d {
                    let xhat = (p.concat.get(i, c) - bn_mean[c]) * bn_inv_std[c];
                    normalized.set(i, c, xhat);
                    let mut y = params.bn_scale.data()[c] * xhat + params.bn_shift.data()[c];
                    if let Some(m) = &mask {
                        y *= m.get(i, c);
                    }
                    let pre = y + p.x.get(i, c);
                    pre_activation.set(i, c, pre);
                    xbar.set(i, c, pre.max(0.0));
                }
            }
            let (content_user, content_item) = aggregate_entities(&xbar, params);
            let cf_user = params.cf_user.row(p.user);
            let cf_item = params.cf_item.row(p.item);
            let gate_user = integration_gate(cf_user, &content_user, &params.gate_user);
            let gate_item = integration_gate(cf_item, &content_item, params.gate_item());
            let scores = Scores {
                content: score_content(&content_user, &content_item),
                preference: score_preference(cf_user, cf_item),
                combined: dot(&gate_user.combined, &gate_item.combined),
            };
            ForwardTrace {
                user: p.user,
                item: p.item,
                user_features: p.user_features,
                item_features: p.item_features,
                x: p.x,
                heads: p.heads,
                concat: p.concat,
                normalized,
                dropout_mask: mask,
                pre_activation,
                xbar,
                content_user,
                content_item,
                gate_user,
                gate_item,
                scores,
            }
        })
        .collect();

    Ok(BatchTrace {
        examples,
        mode,
        bn_mean,
        bn_var,
        bn_inv_std,
    })
}

/// Forward one pair.
pub fn forward(
    params: &SainParams,
    bn_stats: &BatchNormStats,
    features: &FeatureTables,
    user: usize,
    item: usize,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardTrace, ModelError> {
    let mut batch = forward_batch(params, bn_stats, features, &[(user, item)], config, mode)?;
    Ok(batch.examples.remove(0))
}

/// Eval-mode scores for many pairs, processed in bounded batches.
pub fn predict_scores(
    params: &SainParams,
    bn_stats: &BatchNormStats,
    features: &FeatureTables,
    pairs: &[(usize, usize)],
    config: &ModelConfig,
) -> Result<Vec<Scores>, ModelError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(1024) {
        out.extend(forward_batch(params, bn_stats, features, chunk, config, Mode::eval())?.scores());
    }
    Ok(out)
}

/// Mean squared errors of the three scores and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub content: f64,
    pub preference: f64,
    pub combined: f64,
    pub total: f64,
}

pub fn joint_loss(scores: &[Scores], ratings: &[f64], weights: [f64; 3]) -> Result<LossBreakdown, ModelError> {
    if scores.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if scores.len() != ratings.len() {
        return Err(ModelError::Shape(format!(
            "{} scores for {} ratings",
            scores.len(),
            ratings.len()
        )));
    }
    let n = scores.len() as f64;
    let mut mse = [0.0; 3];
    for (s, r) in scores.iter().zip(ratings) {
        for (acc, v) in mse.iter_mut().zip(s.as_array()) {
            *acc += (v - r) * (v - r);
        }
    }
    mse.iter_mut().for_each(|v| *v /= n);
    Ok(LossBreakdown {
        content: mse[0],
        preference: mse[1],
        combined: mse[2],
        total: weights[0] * mse[0] + weights[1] * mse[1] + weights[2] * mse[2],
    })
}

struct Upstream {
    /// Gradient w.r.t. the batch-norm output (after scale/shift, before dropout).
    d_bn_out: Matrix,
    /// Gradient reaching the residual input.
    d_residual: Matrix,
    d_cf_user: Vec<f64>,
    d_cf_item: Vec<f64>,
}

/// Exact gradients of [`joint_loss`] with respect to every learnable tensor.
pub fn backward(
    batch: &BatchTrace,
    ratings: &[f64],
    params: &SainParams,
    config: &ModelConfig,
) -> Result<SainParams, ModelError> {
    let examples = &batch.examples;
    if examples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if ratings.len() != examples.len() {
        return Err(ModelError::TraceMismatch(format!(
            "{} traces for {} ratings",
            examples.len(),
            ratings.len()
        )));
    }
    let d = params.dim();
    if examples[0].x.cols() != d || examples[0].heads.len() != params.heads.len() {
        return Err(ModelError::TraceMismatch("trace does not match parameter shapes".into()));
    }
    let dh = d / params.heads.len();
    let m = params.num_user_fields();
    let n = params.num_item_fields();
    let w = config.loss_weights;
    let scale = 2.0 / examples.len() as f64;
    let shared_gate = params.gate_item.is_none();

    // Phase 1: scores down to the batch-norm output.
    let phase1: Vec<(SainParams, Vec<Upstream>)> = examples
        .par_chunks(CHUNK)
        .zip(ratings.par_chunks(CHUNK))
        .map(|(chunk, chunk_ratings)| {
            let mut g = params.zeros_without_cf();
            let mut ups = Vec::with_capacity(chunk.len());
            for (t, &r) in chunk.iter().zip(chunk_ratings) {
                let g_content = scale * w[0] * (t.scores.content - r);
                let g_pref = scale * w[1] * (t.scores.preference - r);
                let g_comb = scale * w[2] * (t.scores.combined - r);
                let cf_u = params.cf_user.row(t.user);
                let cf_i = params.cf_item.row(t.item);

                let mut d_cf_u = vec![0.0; d];
                let mut d_cf_i = vec![0.0; d];
                let mut d_con_u = vec![0.0; d];
                let mut d_con_i = vec![0.0; d];
                axpy(g_pref, cf_i, &mut d_cf_u);
                axpy(g_pref, cf_u, &mut d_cf_i);
                axpy(g_content, &t.content_item, &mut d_con_u);
                axpy(g_content, &t.content_user, &mut d_con_i);

                let d_comb_u: Vec<f64> = t.gate_item.combined.iter().map(|v| g_comb * v).collect();
                let d_comb_i: Vec<f64> = t.gate_user.combined.iter().map(|v| g_comb * v).collect();
                integration_gate_backward(
                    cf_u,
                    &t.content_user,
                    t.gate_user.alpha,
                    &params.gate_user,
                    &d_comb_u,
                    &mut g.gate_user,
                    &mut d_cf_u,
                    &mut d_con_u,
                );
                {
                    let (gate, grad) = if shared_gate {
                        (&params.gate_user, &mut g.gate_user)
                    } else {
                        (
                            params.gate_item.as_ref().expect("item gate"),
                            g.gate_item.as_mut().expect("item gate grad"),
                        )
                    };
                    integration_gate_backward(
                        cf_i,
                        &t.content_item,
                        t.gate_item.alpha,
                        gate,
                        &d_comb_i,
                        grad,
                        &mut d_cf_i,
                        &mut d_con_i,
                    );
                }

                let len = t.xbar.rows();
                let mut d_xbar = Matrix::zeros(len, d);
                aggregate_backward(
                    &t.xbar,
                    0,
                    m,
                    &params.agg_user_weight,
                    &d_con_u,
                    &mut g.agg_user_weight,
                    &mut g.agg_user_bias,
                    &mut d_xbar,
                );
                aggregate_backward(
                    &t.xbar,
                    m,
                    n,
                    &params.agg_item_weight,
                    &d_con_i,
                    &mut g.agg_item_weight,
                    &mut g.agg_item_bias,
                    &mut d_xbar,
                );

                let mut d_residual = Matrix::zeros(len, d);
                let mut d_bn_out = Matrix::zeros(len, d);
                for (k, (&pre, &dxb)) in t.pre_activation.data().iter().zip(d_xbar.data()).enumerate() {
                    let dp = if pre > 0.0 { dxb } else { 0.0 };
                    d_residual.data_mut()[k] = dp;
                    d_bn_out.data_mut()[k] = match &t.dropout_mask {
                        Some(mask) => dp * mask.data()[k],
                        None => dp,
                    };
                }
                ups.push(Upstream {
                    d_bn_out,
                    d_residual,
                    d_cf_user: d_cf_u,
                    d_cf_item: d_cf_i,
                });
            }
            (g, ups)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut upstream = Vec::with_capacity(examples.len());
    for (g, ups) in phase1 {
        grads.add_assign_without_cf(&g);
        upstream.extend(ups);
    }
    for (t, up) in examples.iter().zip(&upstream) {
        axpy(1.0, &up.d_cf_user, grads.cf_user.row_mut(t.user));
        axpy(1.0, &up.d_cf_item, grads.cf_item.row_mut(t.item));
    }

    // Phase 2: batch-norm reductions.
    let gamma = params.bn_scale.data().to_vec();
    let mut sum_dy = vec![0.0; d];
    let mut sum_dy_xhat = vec![0.0; d];
    for (t, up) in examples.iter().zip(&upstream) {
        for i in 0..t.x.rows() {
            let dy = up.d_bn_out.row(i);
            let xh = t.normalized.row(i);
            for c in 0..d {
                sum_dy[c] += dy[c];
                sum_dy_xhat[c] += dy[c] * xh[c];
            }
        }
    }
    grads.bn_shift.data_mut().iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
    grads.bn_scale.data_mut().iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
    let count = batch.positions() as f64;
    let batch_stats = batch.mode.batch_norm == BatchNormMode::Batch;
    let inv_std = &batch.bn_inv_std;

    // Phase 3: through the heads into the embeddings.
    let phase3: Vec<SainParams> = examples
        .par_chunks(CHUNK)
        .zip(upstream.par_chunks(CHUNK))
        .map(|(chunk, ups)| {
            let mut g = params.zeros_without_cf();
            for (t, up) in chunk.iter().zip(ups) {
                let len = t.x.rows();
                let mut d_concat = Matrix::zeros(len, d);
                for i in 0..len {
                    for c in 0..d {
                        let dxhat = gamma[c] * up.d_bn_out.get(i, c);
                        let v = if batch_stats {
                            inv_std[c] / count
                                * (count * dxhat
                                    - gamma[c] * sum_dy[c]
                                    - t.normalized.get(i, c) * gamma[c] * sum_dy_xhat[c])
                        } else {
                            dxhat * inv_std[c]
                        };
                        d_concat.set(i, c, v);
                    }
                }
                let mut dx = up.d_residual.clone();
                for (h, (head, trace)) in params.heads.iter().zip(&t.heads).enumerate() {
                    let d_out = Matrix::from_fn(len, dh, |i, c| d_concat.get(i, h * dh + c));
                    attention_head_backward(&t.x, head, trace, &d_out, &mut g.heads[h], &mut dx);
                }
                embed_pair_backward(&t.user_features, &t.item_features, &dx, &mut g);
            }
            g
        })
        .collect();
    for g in phase3 {
        grads.add_assign_without_cf(&g);
    }
    Ok(grads)
}
