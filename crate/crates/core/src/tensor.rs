//! Dense 64-bit kernel: row-major matrices, softmax, top-k selection, Adam with
//! decoupled weight decay, and a central finite-difference gradient oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("empty logits")]
    EmptyLogits,
    #[error("non-finite logit")]
    NonFiniteLogit,
    #[error("k must be positive")]
    ZeroK,
    #[error("empty scores")]
    EmptyScores,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("non-finite evaluation at coordinate {coordinate}")]
    NonFiniteEval { coordinate: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros_like(other: &Matrix) -> Self {
        Self::zeros(other.rows, other.cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn check_shape(&self, expected: (usize, usize)) -> Result<(), TensorError> {
        if self.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                expected,
                got: self.shape(),
            });
        }
        Ok(())
    }

    /// `out = self · x` for a column vector `x` of length `cols`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · y` for a vector `y` of length `rows`.
    pub fn t_matvec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += a ⊗ b` where `a` has length `rows` and `b` length `cols`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                axpy(ar, b, self.row_mut(r));
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), TensorError> {
        other.check_shape(self.shape())?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFiniteLogit);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Indices of the `k` largest scores, ties to the smaller index, returned in
/// ascending index order. `k` larger than the input selects everything.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>, TensorError> {
    if k == 0 {
        return Err(TensorError::ZeroK);
    }
    if scores.is_empty() {
        return Err(TensorError::EmptyScores);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if k < scores.len() {
        // total_cmp keeps NaN ordering deterministic; callers only pass finite scores.
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }
}

/// One bias-corrected Adam step followed by decoupled weight decay
/// `param -= lr * weight_decay * param_before_step`.
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TensorError> {
    grad.check_shape(param.shape())?;
    state.m.check_shape(param.shape())?;
    state.v.check_shape(param.shape())?;

    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let decay = lr * weight_decay;

    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        let before = *p;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
        if decay != 0.0 {
            *p -= decay * before;
        }
    }
    Ok(())
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff_gradient<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>, TensorError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(TensorError::BadStep(eps));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFiniteEval { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let u = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_row(&[5.0]).unwrap(), vec![1.0]);
        let p = softmax_row(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(softmax_row(&[]).unwrap_err().to_string(), "empty logits");
        assert_eq!(
            softmax_row(&[1.0, f64::NAN]).unwrap_err().to_string(),
            "non-finite logit"
        );
        assert_eq!(
            softmax_row(&[f64::INFINITY]).unwrap_err(),
            TensorError::NonFiniteLogit
        );
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_row(&[1000.0, 1000.0 + 2f64.ln()]).unwrap();
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.4, 0.4, 0.4], 1).unwrap(), vec![0]);
        assert_eq!(top_k_indices(&[0.3, 0.2, 0.1], 10).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[0.3], 0).unwrap_err().to_string(), "k must be positive");
    }

    #[test]
    fn adam_examples() {
        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &Matrix::from_vec(1, 1, vec![1.0]).unwrap(), &mut st, 0.1, 0.0).unwrap();
        // m̂ = v̂ = 1, so the step is 0.1 / (1 + 1e-8)
        assert!((p.get(0, 0) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-8);
        assert_eq!(st.t, 1);

        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &Matrix::zeros(1, 1), &mut st, 0.1, 0.5).unwrap();
        assert!((p.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_is_bit_identical() {
        let mut p = Matrix::from_vec(2, 2, vec![0.3, -1.7, 1e-9, 42.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_param(&p);
        for _ in 0..3 {
            adam_step(&mut p, &Matrix::zeros(2, 2), &mut st, 1e-3, 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p);
        let err = adam_step(&mut p, &Matrix::zeros(2, 3), &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().starts_with("shape mismatch"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_| 7.5, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        let g = finite_diff_gradient(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let err = finite_diff_gradient(|x| if x[1] > 1.0 { f64::NAN } else { x[0] }, &[0.0, 1.0], 1e-3)
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteEval { coordinate: 1 });
        assert!(finite_diff_gradient(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn matvec_and_transpose() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        let mut out = vec![0.0; 3];
        w.t_matvec_acc(&[1.0, 1.0], &mut out);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax_row(&logits).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax_row(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn top_k_matches_brute_force(
            scores in prop::collection::vec(0u8..6, 1..10),
            k in 1usize..12,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let got = top_k_indices(&scores, k).unwrap();
            prop_assert_eq!(got.len(), k.min(scores.len()));
            // every selected index beats (or ties with a larger index than) every dropped one
            for j in 0..scores.len() {
                if got.contains(&j) {
                    continue;
                }
                for &i in &got {
                    prop_assert!(scores[i] > scores[j] || (scores[i] == scores[j] && i < j));
                }
            }
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
