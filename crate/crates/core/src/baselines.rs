//! BiasedMF: `μ + b_u + b_i + p_u · q_i` with a frozen global mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::tensor::{axpy, dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedMfParams {
    /// Training-set mean rating; not learned.
    pub global_mean: f64,
    pub user_bias: Matrix,
    pub item_bias: Matrix,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
}

pub fn clip_rating(v: f64) -> f64 {
    v.clamp(1.0, 5.0)
}

impl BiasedMfParams {
    /// Zero biases, factors uniform in `±bound`.
    pub fn init<R: Rng>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        bound: f64,
        global_mean: f64,
        rng: &mut R,
    ) -> Self {
        let mut uniform = |rows: usize| Matrix::from_fn(rows, dim, |_, _| rng.gen_range(-bound..bound));
        let user_factors = uniform(num_users);
        let item_factors = uniform(num_items);
        Self {
            global_mean,
            user_bias: Matrix::zeros(num_users, 1),
            item_bias: Matrix::zeros(num_items, 1),
            user_factors,
            item_factors,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_factors.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.rows()
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("user_bias".into(), &self.user_bias),
            ("item_bias".into(), &self.item_bias),
            ("user_factors".into(), &self.user_factors),
            ("item_factors".into(), &self.item_factors),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.user_bias,
            &mut self.item_bias,
            &mut self.user_factors,
            &mut self.item_factors,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|m| m.fill(0.0));
        z
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, m)| m.data().to_vec()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn check(&self, user: usize, item: usize) -> Result<(), ModelError> {
        if user >= self.num_users() {
            return Err(ModelError::UnknownEntity(format!("user index {user}")));
        }
        if item >= self.num_items() {
            return Err(ModelError::UnknownEntity(format!("item index {item}")));
        }
        Ok(())
    }

    /// Unclipped score, as used by the training loss.
    pub fn score(&self, user: usize, item: usize) -> Result<f64, ModelError> {
        self.check(user, item)?;
        Ok(self.global_mean
            + self.user_bias.get(user, 0)
            + self.item_bias.get(item, 0)
            + dot(self.user_factors.row(user), self.item_factors.row(item)))
    }

    /// Mean squared error over a batch.
    pub fn loss(&self, pairs: &[(usize, usize)], ratings: &[f64]) -> Result<f64, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut sum = 0.0;
        for (&(u, i), r) in pairs.iter().zip(ratings) {
            let e = self.score(u, i)? - r;
            sum += e * e;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Loss and its gradient with respect to every learnable tensor.
    pub fn loss_and_gradient(&self, pairs: &[(usize, usize)], ratings: &[f64]) -> Result<(f64, Self), ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if pairs.len() != ratings.len() {
            return Err(ModelError::Shape(format!("{} pairs for {} ratings", pairs.len(), ratings.len())));
        }
        let mut g = self.zeros_like();
        let scale = 2.0 / pairs.len() as f64;
        let mut sum = 0.0;
        for (&(u, i), r) in pairs.iter().zip(ratings) {
            let e = self.score(u, i)? - r;
            sum += e * e;
            let ge = scale * e;
            g.user_bias.data_mut()[u] += ge;
            g.item_bias.data_mut()[i] += ge;
            axpy(ge, self.item_factors.row(i), g.user_factors.row_mut(u));
            axpy(ge, self.user_factors.row(u), g.item_factors.row_mut(i));
        }
        Ok((sum / pairs.len() as f64, g))
    }
}

/// Evaluation-time prediction, clipped to the rating range.
pub fn biasedmf_predict(user: usize, item: usize, params: &BiasedMfParams) -> Result<f64, ModelError> {
    Ok(clip_rating(params.score(user, item)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_model(mean: f64) -> BiasedMfParams {
        let mut p = BiasedMfParams::init(3, 4, 2, 0.1, mean, &mut ChaCha8Rng::seed_from_u64(0));
        p.user_factors.fill(0.0);
        p.item_factors.fill(0.0);
        p
    }

    #[test]
    fn degenerate_model_predicts_mean() {
        let p = zero_model(3.7);
        assert_eq!(biasedmf_predict(1, 2, &p).unwrap(), 3.7);
    }

    #[test]
    fn arithmetic_example() {
        let mut p = zero_model(3.0);
        p.user_bias.set(0, 0, 0.5);
        p.item_bias.set(1, 0, -0.25);
        p.user_factors.row_mut(0).copy_from_slice(&[0.5, 0.1]);
        p.item_factors.row_mut(1).copy_from_slice(&[0.2, 0.0]);
        assert!((biasedmf_predict(0, 1, &p).unwrap() - 3.35).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_clipped() {
        let mut p = zero_model(3.0);
        p.user_bias.set(0, 0, 10.0);
        p.user_bias.set(1, 0, -10.0);
        assert_eq!(biasedmf_predict(0, 0, &p).unwrap(), 5.0);
        assert_eq!(biasedmf_predict(1, 0, &p).unwrap(), 1.0);
        assert_eq!(p.score(0, 0).unwrap(), 13.0);
    }

    #[test]
    fn unknown_ids_error() {
        let p = zero_model(3.0);
        assert!(matches!(biasedmf_predict(3, 0, &p), Err(ModelError::UnknownEntity(_))));
        assert!(matches!(biasedmf_predict(0, 4, &p), Err(ModelError::UnknownEntity(_))));
    }

    #[test]
    fn symmetric_under_side_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = BiasedMfParams::init(3, 3, 4, 0.5, 3.2, &mut rng);
        p.user_bias = Matrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
        p.item_bias = Matrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
        let mut swapped = p.clone();
        std::mem::swap(&mut swapped.user_bias, &mut swapped.item_bias);
        std::mem::swap(&mut swapped.user_factors, &mut swapped.item_factors);
        for u in 0..3 {
            for i in 0..3 {
                let a = p.score(u, i).unwrap();
                let b = swapped.score(i, u).unwrap();
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
