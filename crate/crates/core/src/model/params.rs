use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::data::{Dataset, FeatureVocab};
use crate::tensor::Matrix;

/// Sizes the parameter tables are built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Field names in sequence order (user fields, then item fields).
    pub field_names: Vec<String>,
    pub field_sizes: Vec<usize>,
    pub num_user_fields: usize,
    pub num_users: usize,
    pub num_items: usize,
}

impl ModelShape {
    pub fn from_vocab(vocab: &FeatureVocab, num_users: usize, num_items: usize) -> Self {
        Self {
            field_names: vocab.field_names(),
            field_sizes: vocab.sizes(),
            num_user_fields: vocab.num_user_fields(),
            num_users,
            num_items,
        }
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        Self::from_vocab(&data.vocab, data.ratings.users.len(), data.ratings.items.len())
    }

    pub fn num_item_fields(&self) -> usize {
        self.field_names.len() - self.num_user_fields
    }

    pub fn seq_len(&self) -> usize {
        self.field_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// d' × d projections.
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Scalar-logit affine map `g(x) = w·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl GateParams {
    pub fn logit(&self, x: &[f64]) -> f64 {
        crate::tensor::dot(self.weight.data(), x) + self.bias.get(0, 0)
    }
}

/// Every learnable tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SainParams {
    pub field_names: Vec<String>,
    /// One `vocab × d` table per field.
    pub embeddings: Vec<Matrix>,
    pub cf_user: Matrix,
    pub cf_item: Matrix,
    pub heads: Vec<HeadParams>,
    /// `d × (m·d)` and `d × (n·d)` aggregation maps with `1 × d` biases.
    pub agg_user_weight: Matrix,
    pub agg_user_bias: Matrix,
    pub agg_item_weight: Matrix,
    pub agg_item_bias: Matrix,
    pub gate_user: GateParams,
    /// `None` when the gate is shared between both towers.
    pub gate_item: Option<GateParams>,
    pub bn_scale: Matrix,
    pub bn_shift: Matrix,
}

/// Running batch-norm statistics; never touched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Exponential moving average toward a batch mean and (biased) variance
    /// computed over `count` positions. The stored variance is unbiased.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize, momentum: f64) {
        let correction = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch_mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch_var[c] * correction;
        }
    }
}

impl SainParams {
    /// Tables uniform in `±table_init`, dense weights uniform in `±1/√d`;
    /// biases and gate biases start at zero, batch-norm scale at one.
    pub fn init<R: Rng>(shape: &ModelShape, config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let dh = config.head_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let t = config.table_init;
        let mut table = |rows: usize| Matrix::from_fn(rows, d, |_, _| rng.gen_range(-t..t));
        let embeddings = shape.field_sizes.iter().map(|&n| table(n)).collect();
        let cf_user = table(shape.num_users);
        let cf_item = table(shape.num_items);
        let mut uniform = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));

        let heads = (0..config.num_heads)
            .map(|_| HeadParams {
                query: uniform(dh, d),
                key: uniform(dh, d),
                value: uniform(dh, d),
            })
            .collect();
        let m = shape.num_user_fields;
        let n = shape.num_item_fields();
        let agg_user_weight = uniform(d, m * d);
        let agg_item_weight = uniform(d, n * d);
        let mut gate = || GateParams {
            weight: uniform(1, d),
            bias: Matrix::zeros(1, 1),
        };
        let gate_user = gate();
        let gate_item = (!config.gate_shared).then(gate);
        Ok(Self {
            field_names: shape.field_names.clone(),
            embeddings,
            cf_user,
            cf_item,
            heads,
            agg_user_weight,
            agg_user_bias: Matrix::zeros(1, d),
            agg_item_weight,
            agg_item_bias: Matrix::zeros(1, d),
            gate_user,
            gate_item,
            bn_scale: Matrix::from_fn(1, d, |_, _| 1.0),
            bn_shift: Matrix::zeros(1, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.cf_user.cols()
    }

    pub fn num_user_fields(&self) -> usize {
        self.agg_user_weight.cols() / self.dim()
    }

    pub fn num_item_fields(&self) -> usize {
        self.agg_item_weight.cols() / self.dim()
    }

    pub fn gate_item(&self) -> &GateParams {
        self.gate_item.as_ref().unwrap_or(&self.gate_user)
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|m| m.fill(0.0));
        z
    }

    /// Flat enumeration of learnable tensors. Each appears exactly once and
    /// in the same order as [`SainParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        for (name, m) in self.field_names.iter().zip(&self.embeddings) {
            out.push((format!("embedding.{name}"), m));
        }
        out.push(("cf.user".into(), &self.cf_user));
        out.push(("cf.item".into(), &self.cf_item));
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("head{h}.query"), &head.query));
            out.push((format!("head{h}.key"), &head.key));
            out.push((format!("head{h}.value"), &head.value));
        }
        out.push(("aggregate.user.weight".into(), &self.agg_user_weight));
        out.push(("aggregate.user.bias".into(), &self.agg_user_bias));
        out.push(("aggregate.item.weight".into(), &self.agg_item_weight));
        out.push(("aggregate.item.bias".into(), &self.agg_item_bias));
        let user_gate = if self.gate_item.is_some() { "gate.user" } else { "gate.shared" };
        out.push((format!("{user_gate}.weight"), &self.gate_user.weight));
        out.push((format!("{user_gate}.bias"), &self.gate_user.bias));
        if let Some(g) = &self.gate_item {
            out.push(("gate.item.weight".into(), &g.weight));
            out.push(("gate.item.bias".into(), &g.bias));
        }
        out.push(("batchnorm.scale".into(), &self.bn_scale));
        out.push(("batchnorm.shift".into(), &self.bn_shift));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.extend(self.embeddings.iter_mut());
        out.push(&mut self.cf_user);
        out.push(&mut self.cf_item);
        for head in &mut self.heads {
            out.push(&mut head.query);
            out.push(&mut head.key);
            out.push(&mut head.value);
        }
        out.push(&mut self.agg_user_weight);
        out.push(&mut self.agg_user_bias);
        out.push(&mut self.agg_item_weight);
        out.push(&mut self.agg_item_bias);
        out.push(&mut self.gate_user.weight);
        out.push(&mut self.gate_user.bias);
        if let Some(g) = &mut self.gate_item {
            out.push(&mut g.weight);
            out.push(&mut g.bias);
        }
        out.push(&mut self.bn_scale);
        out.push(&mut self.bn_shift);
        out
    }

    /// Zero gradient buffer whose CF tables are empty; CF rows are scattered
    /// separately by the caller.
    pub(crate) fn zeros_without_cf(&self) -> Self {
        let z = Matrix::zeros_like;
        Self {
            field_names: self.field_names.clone(),
            embeddings: self.embeddings.iter().map(z).collect(),
            cf_user: Matrix::zeros(0, self.dim()),
            cf_item: Matrix::zeros(0, self.dim()),
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    query: z(&h.query),
                    key: z(&h.key),
                    value: z(&h.value),
                })
                .collect(),
            agg_user_weight: z(&self.agg_user_weight),
            agg_user_bias: z(&self.agg_user_bias),
            agg_item_weight: z(&self.agg_item_weight),
            agg_item_bias: z(&self.agg_item_bias),
            gate_user: GateParams {
                weight: z(&self.gate_user.weight),
                bias: z(&self.gate_user.bias),
            },
            gate_item: self.gate_item.as_ref().map(|g| GateParams {
                weight: z(&g.weight),
                bias: z(&g.bias),
            }),
            bn_scale: z(&self.bn_scale),
            bn_shift: z(&self.bn_shift),
        }
    }

    /// Add every tensor of `other` except its (empty) CF tables.
    pub(crate) fn add_assign_without_cf(&mut self, other: &SainParams) {
        for (a, (name, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if name.starts_with("cf.") {
                continue;
            }
            a.add_assign(b).expect("gradient shapes match parameters");
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_scalars());
        for (_, m) in self.tensors() {
            v.extend_from_slice(m.data());
        }
        v
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

    pub fn add_assign(&mut self, other: &SainParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b.1).expect("gradient shapes match parameters");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn shape() -> ModelShape {
        ModelShape {
            field_names: vec!["a".into(), "b".into(), "c".into()],
            field_sizes: vec![3, 4, 5],
            num_user_fields: 2,
            num_users: 6,
            num_items: 7,
        }
    }

    #[test]
    fn tensors_registered_once() {
        for shared in [false, true] {
            let cfg = ModelConfig {
                dim: 8,
                gate_shared: shared,
                ..Default::default()
            };
            let mut p = SainParams::init(&shape(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
            let unique: HashSet<&String> = names.iter().collect();
            assert_eq!(unique.len(), names.len());
            assert_eq!(p.tensors_mut().len(), names.len());
            let expected = 3 + 2 + 3 * 2 + 4 + if shared { 2 } else { 4 } + 2;
            assert_eq!(names.len(), expected);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = ModelConfig {
            dim: 4,
            ..Default::default()
        };
        let p = SainParams::init(&shape(), &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_scalars());
        let mut q = p.zeros_like();
        q.assign_flat(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn init_bounds() {
        let cfg = ModelConfig {
            dim: 16,
            ..Default::default()
        };
        let p = SainParams::init(&shape(), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(p.cf_user.max_abs() <= cfg.table_init);
        assert!(p.heads[0].query.max_abs() <= 0.25);
        assert_eq!(p.gate_user.bias.get(0, 0), 0.0);
        assert!(p.bn_scale.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            dim: 5,
            num_heads: 2,
            ..Default::default()
        };
        assert!(SainParams::init(&shape(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
