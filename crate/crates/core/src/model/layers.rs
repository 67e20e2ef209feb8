//! Per-example building blocks and their hand-derived backward passes.

use super::params::{GateParams, HeadParams, SainParams};
use super::ModelError;
use crate::data::EntityFeatures;
use crate::tensor::{axpy, dot, softmax_row, top_k_indices, Matrix};

/// Look up the feature sequence for a (user, item) pair: user slots first,
/// then item slots, one `d`-vector per slot. Multi-valued slots are
/// mean-pooled.
pub fn embed_pair(
    user: &EntityFeatures,
    item: &EntityFeatures,
    params: &SainParams,
) -> Result<Matrix, ModelError> {
    let m = params.num_user_fields();
    let n = params.num_item_fields();
    if user.slots.len() != m || item.slots.len() != n {
        return Err(ModelError::Shape(format!(
            "expected {m} user and {n} item slots, got {} and {}",
            user.slots.len(),
            item.slots.len()
        )));
    }
    let d = params.dim();
    let mut x = Matrix::zeros(m + n, d);
    for (pos, slot) in user.slots.iter().chain(&item.slots).enumerate() {
        let table = &params.embeddings[pos];
        if slot.is_empty() {
            return Err(ModelError::Shape(format!("empty slot for field {pos}")));
        }
        let scale = 1.0 / slot.len() as f64;
        for &idx in slot {
            if idx >= table.rows() {
                return Err(ModelError::IndexOutOfRange {
                    field: params.field_names[pos].clone(),
                    index: idx,
                    size: table.rows(),
                });
            }
            axpy(scale, table.row(idx), x.row_mut(pos));
        }
    }
    Ok(x)
}

/// Scatter the sequence gradient back into the embedding tables.
pub fn embed_pair_backward(
    user: &EntityFeatures,
    item: &EntityFeatures,
    dx: &Matrix,
    grads: &mut SainParams,
) {
    for (pos, slot) in user.slots.iter().chain(&item.slots).enumerate() {
        let scale = 1.0 / slot.len() as f64;
        for &idx in slot {
            axpy(scale, dx.row(pos), grads.embeddings[pos].row_mut(idx));
        }
    }
}

/// Intermediate values of one attention head over a feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// Full softmax attention, one row per feature.
    pub weights: Matrix,
    /// Top-K filtered (and optionally renormalized) attention; zeros elsewhere.
    pub filtered: Matrix,
    /// Kept column indices per row, ascending.
    pub selected: Vec<Vec<usize>>,
    /// False when K covers the whole row and filtering is the identity.
    pub filter_active: bool,
    pub renormalized: bool,
    /// Head output, one `d'`-vector per feature.
    pub output: Matrix,
}

fn project_rows(w: &Matrix, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        w.matvec_into(x.row(i), out.row_mut(i));
    }
    out
}

/// Scaled dot-product attention of one head with top-K row filtering.
///
/// Logits are `(W_Q x_i)·(W_K x_j) / √d'`, softmax runs over the full row,
/// then only the `top_k` largest weights per row are kept. When `top_k`
/// covers the row the full softmax is used unchanged.
pub fn attention_head(
    x: &Matrix,
    head: &HeadParams,
    top_k: usize,
    renormalize: bool,
) -> Result<HeadTrace, ModelError> {
    let len = x.rows();
    if len == 0 {
        return Err(ModelError::Shape("empty feature sequence".into()));
    }
    if head.query.cols() != x.cols() {
        return Err(ModelError::Shape(format!(
            "projection expects dim {}, sequence has {}",
            head.query.cols(),
            x.cols()
        )));
    }
    let query = project_rows(&head.query, x);
    let key = project_rows(&head.key, x);
    let value = project_rows(&head.value, x);
    let scale = 1.0 / (head.query.rows() as f64).sqrt();
    let filter_active = top_k < len;

    let mut weights = Matrix::zeros(len, len);
    let mut filtered = Matrix::zeros(len, len);
    let mut selected = Vec::with_capacity(len);
    let mut output = Matrix::zeros(len, head.value.rows());
    for i in 0..len {
        let logits: Vec<f64> = (0..len).map(|j| dot(query.row(i), key.row(j)) * scale).collect();
        let row = softmax_row(&logits).map_err(|e| ModelError::NonFinite(format!("attention logits: {e}")))?;
        weights.row_mut(i).copy_from_slice(&row);
        let keep = if filter_active {
            top_k_indices(&row, top_k)?
        } else {
            (0..len).collect()
        };
        let norm = if filter_active && renormalize {
            keep.iter().map(|&j| row[j]).sum::<f64>()
        } else {
            1.0
        };
        for &j in &keep {
            let w = row[j] / norm;
            filtered.set(i, j, w);
            axpy(w, value.row(j), output.row_mut(i));
        }
        selected.push(keep);
    }
    Ok(HeadTrace {
        query,
        key,
        value,
        weights,
        filtered,
        selected,
        filter_active,
        renormalized: renormalize,
        output,
    })
}

/// Backpropagate `d_out` (one `d'`-row per feature) through a head. The
/// selected set is treated as fixed.
pub fn attention_head_backward(
    x: &Matrix,
    head: &HeadParams,
    trace: &HeadTrace,
    d_out: &Matrix,
    grad: &mut HeadParams,
    dx: &mut Matrix,
) {
    let len = x.rows();
    let dh = head.query.rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(len, dh);
    let mut dk = Matrix::zeros(len, dh);
    let mut dv = Matrix::zeros(len, dh);
    let mut d_filtered = vec![0.0; len];
    let mut d_weights = vec![0.0; len];

    for i in 0..len {
        let g = d_out.row(i);
        d_filtered.iter_mut().for_each(|v| *v = 0.0);
        for &j in &trace.selected[i] {
            d_filtered[j] = dot(g, trace.value.row(j));
            axpy(trace.filtered.get(i, j), g, dv.row_mut(j));
        }

        d_weights.iter_mut().for_each(|v| *v = 0.0);
        if trace.filter_active && trace.renormalized {
            let norm: f64 = trace.selected[i].iter().map(|&j| trace.weights.get(i, j)).sum();
            let inner: f64 = trace.selected[i]
                .iter()
                .map(|&j| d_filtered[j] * trace.filtered.get(i, j))
                .sum();
            for &j in &trace.selected[i] {
                d_weights[j] = (d_filtered[j] - inner) / norm;
            }
        } else {
            d_weights.copy_from_slice(&d_filtered);
        }

        let a = trace.weights.row(i);
        let inner = dot(a, &d_weights);
        for j in 0..len {
            let de = a[j] * (d_weights[j] - inner) * scale;
            if de != 0.0 {
                axpy(de, trace.key.row(j), dq.row_mut(i));
                axpy(de, trace.query.row(i), dk.row_mut(j));
            }
        }
    }

    for i in 0..len {
        let xi = x.row(i);
        grad.query.add_outer(dq.row(i), xi);
        grad.key.add_outer(dk.row(i), xi);
        grad.value.add_outer(dv.row(i), xi);
        let dxi = dx.row_mut(i);
        head.query.t_matvec_acc(dq.row(i), dxi);
        head.key.t_matvec_acc(dk.row(i), dxi);
        head.value.t_matvec_acc(dv.row(i), dxi);
    }
}

/// Affine map of the concatenated feature rows `[first, first + count)`.
pub fn aggregate(xbar: &Matrix, first: usize, count: usize, weight: &Matrix, bias: &Matrix) -> Vec<f64> {
    let d = xbar.cols();
    let cat = &xbar.data()[first * d..(first + count) * d];
    let mut out = weight.matvec(cat);
    axpy(1.0, bias.data(), &mut out);
    out
}

/// Content vectors (user, item) from the post-attention sequence.
pub fn aggregate_entities(xbar: &Matrix, params: &SainParams) -> (Vec<f64>, Vec<f64>) {
    let m = params.num_user_fields();
    let n = params.num_item_fields();
    (
        aggregate(xbar, 0, m, &params.agg_user_weight, &params.agg_user_bias),
        aggregate(xbar, m, n, &params.agg_item_weight, &params.agg_item_bias),
    )
}

pub fn aggregate_backward(
    xbar: &Matrix,
    first: usize,
    count: usize,
    weight: &Matrix,
    d_out: &[f64],
    grad_weight: &mut Matrix,
    grad_bias: &mut Matrix,
    d_xbar: &mut Matrix,
) {
    let d = xbar.cols();
    let range = first * d..(first + count) * d;
    grad_weight.add_outer(d_out, &xbar.data()[range.clone()]);
    axpy(1.0, d_out, grad_bias.data_mut());
    weight.t_matvec_acc(d_out, &mut d_xbar.data_mut()[range]);
}

pub fn score_content(user: &[f64], item: &[f64]) -> f64 {
    dot(user, item)
}

pub fn score_preference(user_cf: &[f64], item_cf: &[f64]) -> f64 {
    dot(user_cf, item_cf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// Weight on the collaborative vector.
    pub alpha: f64,
    pub combined: Vec<f64>,
}

/// Two-logit softmax `exp(g(cf)) / (exp(g(cf)) + exp(g(content)))` and the
/// convex combination `alpha·cf + (1 − alpha)·content`.
///
/// The logit difference `g(cf) − g(content) = w·(cf − content)` is formed
/// directly, so the shared bias cancels exactly rather than up to rounding.
pub fn integration_gate(cf: &[f64], content: &[f64], gate: &GateParams) -> GateOutput {
    let diff: f64 = gate
        .weight
        .data()
        .iter()
        .zip(cf.iter().zip(content))
        .map(|(w, (c, t))| w * (c - t))
        .sum();
    // two-logit softmax in overflow-free form
    let alpha = if diff >= 0.0 {
        1.0 / (1.0 + (-diff).exp())
    } else {
        let e = diff.exp();
        e / (1.0 + e)
    };
    let combined = cf
        .iter()
        .zip(content)
        .map(|(c, t)| alpha * c + (1.0 - alpha) * t)
        .collect();
    GateOutput { alpha, combined }
}

/// Gradients of the gate given `d_combined`; accumulates into `d_cf`,
/// `d_content` and the gate parameters.
pub fn integration_gate_backward(
    cf: &[f64],
    content: &[f64],
    alpha: f64,
    gate: &GateParams,
    d_combined: &[f64],
    grad: &mut GateParams,
    d_cf: &mut [f64],
    d_content: &mut [f64],
) {
    axpy(alpha, d_combined, d_cf);
    axpy(1.0 - alpha, d_combined, d_content);
    let d_alpha: f64 = d_combined
        .iter()
        .zip(cf.iter().zip(content))
        .map(|(g, (c, t))| g * (c - t))
        .sum();
    // d alpha / d(a - b) = alpha (1 - alpha)
    let d_logit = d_alpha * alpha * (1.0 - alpha);
    let w = grad.weight.data_mut();
    for k in 0..w.len() {
        w[k] += d_logit * (cf[k] - content[k]);
    }
    // the bias enters both logits and cancels, so its gradient stays zero
    axpy(d_logit, gate.weight.data(), d_cf);
    axpy(-d_logit, gate.weight.data(), d_content);
}
