//! Certification of the hand-derived gradients against central finite
//! differences on small random configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::BiasedMfParams;
use crate::data::{EntityFeatures, FeatureTables};
use crate::model::{
    backward, forward_batch, joint_loss, BatchNormMode, BatchNormStats, BatchTrace, ModelConfig, ModelError,
    ModelShape, Mode, SainParams,
};
use crate::tensor::{finite_diff_gradient, TensorError};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error; below it errors are absolute.
pub const REL_FLOOR: f64 = 1e-5;
/// Minimum distance from a top-K boundary or ReLU kink for a fixture to be used.
pub const KINK_MARGIN: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub model: &'static str,
    pub seed: u64,
    pub top_k: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < REL_TOLERANCE
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A tiny random SAIN problem: m = n = 2 fields, batch of 3.
#[derive(Debug, Clone)]
pub struct SainFixture {
    pub config: ModelConfig,
    pub params: SainParams,
    pub bn_stats: BatchNormStats,
    pub features: FeatureTables,
    pub pairs: Vec<(usize, usize)>,
    pub ratings: Vec<f64>,
    pub mode: Mode,
    pub seed: u64,
}

fn random_slots<R: Rng>(rng: &mut R, fields: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..fields)
        .map(|_| {
            let first = rng.gen_range(0..vocab);
            if rng.gen_bool(0.3) {
                let second = (first + rng.gen_range(1..vocab)) % vocab;
                let mut s = vec![first, second];
                s.sort_unstable();
                s
            } else {
                vec![first]
            }
        })
        .collect()
}

impl SainFixture {
    pub fn random(seed: u64, top_k: usize, mode: Mode) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 3;
        let shape = ModelShape {
            field_names: vec!["u0".into(), "u1".into(), "i0".into(), "i1".into()],
            field_sizes: vec![vocab; 4],
            num_user_fields: 2,
            num_users: 4,
            num_items: 4,
        };
        let config = ModelConfig {
            dim: 4,
            num_heads: 2,
            top_k,
            dropout: if mode.dropout_seed.is_some() { 0.25 } else { 0.0 },
            ..Default::default()
        };
        let mut params = SainParams::init(&shape, &config, &mut rng)?;
        for m in params.tensors_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        params.bn_scale.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        let bn_stats = BatchNormStats {
            mean: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            var: (0..4).map(|_| rng.gen_range(0.5..2.0)).collect(),
        };
        let features = FeatureTables {
            users: (0..4)
                .map(|entity| EntityFeatures {
                    entity,
                    slots: random_slots(&mut rng, 2, vocab),
                })
                .collect(),
            items: (0..4)
                .map(|entity| EntityFeatures {
                    entity,
                    slots: random_slots(&mut rng, 2, vocab),
                })
                .collect(),
        };
        let pairs = (0..3).map(|_| (rng.gen_range(0..4), rng.gen_range(0..4))).collect();
        let ratings = (0..3).map(|_| rng.gen_range(1.0..5.0)).collect();
        Ok(Self {
            config,
            params,
            bn_stats,
            features,
            pairs,
            ratings,
            mode,
            seed,
        })
    }

    pub fn trace(&self, params: &SainParams) -> Result<BatchTrace, ModelError> {
        forward_batch(params, &self.bn_stats, &self.features, &self.pairs, &self.config, self.mode)
    }

    pub fn loss(&self, params: &SainParams) -> Result<f64, ModelError> {
        let t = self.trace(params)?;
        Ok(joint_loss(&t.scores(), &self.ratings, self.config.loss_weights)?.total)
    }

    /// Smallest distance of any top-K boundary or ReLU input from a switch point.
    pub fn kink_margin(&self) -> Result<f64, ModelError> {
        let t = self.trace(&self.params)?;
        let mut margin = f64::INFINITY;
        for ex in &t.examples {
            for v in ex.pre_activation.data() {
                margin = margin.min(v.abs());
            }
            for head in &ex.heads {
                if !head.filter_active {
                    continue;
                }
                for i in 0..head.weights.rows() {
                    let mut row = head.weights.row(i).to_vec();
                    row.sort_by(|a, b| b.total_cmp(a));
                    let k = head.selected[i].len();
                    margin = margin.min(row[k - 1] - row[k]);
                }
            }
        }
        Ok(margin)
    }
}

fn per_tensor(names_and_sizes: &[(String, usize)], analytic: &[f64], numeric: &[f64]) -> Vec<TensorCheck> {
    let mut off = 0;
    names_and_sizes
        .iter()
        .map(|(name, size)| {
            let max_rel_error = (off..off + size)
                .map(|k| relative_error(analytic[k], numeric[k]))
                .fold(0.0, f64::max);
            off += size;
            TensorCheck {
                name: name.clone(),
                max_rel_error,
            }
        })
        .collect()
}

pub fn check_sain(fixture: &SainFixture) -> Result<GradCheckReport, GradCheckError> {
    let trace = fixture.trace(&fixture.params)?;
    let grads = backward(&trace, &fixture.ratings, &fixture.params, &fixture.config)?;
    let analytic = grads.flatten();
    let mut scratch = fixture.params.clone();
    let numeric = finite_diff_gradient(
        |flat| {
            scratch.assign_flat(flat);
            fixture.loss(&scratch).unwrap_or(f64::NAN)
        },
        &fixture.params.flatten(),
        FD_STEP,
    )?;
    let layout: Vec<(String, usize)> = fixture
        .params
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.len()))
        .collect();
    Ok(GradCheckReport {
        model: "sain",
        seed: fixture.seed,
        top_k: fixture.config.top_k,
        tensors: per_tensor(&layout, &analytic, &numeric),
    })
}

pub fn check_biasedmf(seed: u64) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BiasedMfParams::init(4, 5, 4, 0.5, 3.5, &mut rng);
    for m in params.tensors_mut() {
        m.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let pairs: Vec<(usize, usize)> = (0..6).map(|_| (rng.gen_range(0..4), rng.gen_range(0..5))).collect();
    let ratings: Vec<f64> = (0..6).map(|_| rng.gen_range(1.0..5.0)).collect();
    let (_, grads) = params.loss_and_gradient(&pairs, &ratings)?;
    let mut scratch = params.clone();
    let numeric = finite_diff_gradient(
        |flat| {
            scratch.assign_flat(flat);
            scratch.loss(&pairs, &ratings).unwrap_or(f64::NAN)
        },
        &params.flatten(),
        FD_STEP,
    )?;
    let layout: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, m)| (n, m.len())).collect();
    Ok(GradCheckReport {
        model: "biasedmf",
        seed,
        top_k: 0,
        tensors: per_tensor(&layout, &grads.flatten(), &numeric),
    })
}

/// Fixtures for `count` accepted seeds per K in `top_ks`, skipping seeds whose
/// configuration sits within [`KINK_MARGIN`] of a top-K tie or ReLU kink.
pub fn sain_fixtures(count: usize, top_ks: &[usize], mode: Mode) -> Result<Vec<SainFixture>, ModelError> {
    let mut out = Vec::new();
    for &k in top_ks {
        let mut seed = 0u64;
        let mut accepted = 0;
        while accepted < count {
            let f = SainFixture::random(seed, k, mode)?;
            if f.kink_margin()? > KINK_MARGIN {
                out.push(f);
                accepted += 1;
            }
            seed += 1;
        }
    }
    Ok(out)
}

/// Gradient-check mode: dropout off, batch norm with running statistics.
pub fn certification_mode() -> Mode {
    Mode {
        batch_norm: BatchNormMode::Running,
        dropout_seed: None,
    }
}

/// The full certification run: SAIN for K ∈ {2, 3, 4} and BiasedMF, `seeds`
/// random configurations each.
pub fn certify(seeds: usize) -> Result<Vec<GradCheckReport>, GradCheckError> {
    let mut reports = Vec::new();
    for f in sain_fixtures(seeds, &[2, 3, 4], certification_mode())? {
        reports.push(check_sain(&f)?);
    }
    for seed in 0..seeds as u64 {
        reports.push(check_biasedmf(seed)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_certified(report: &GradCheckReport) {
        for t in &report.tensors {
            assert!(
                t.max_rel_error < REL_TOLERANCE,
                "{} seed {} K {}: tensor {} rel err {:e}",
                report.model,
                report.seed,
                report.top_k,
                t.name,
                t.max_rel_error
            );
        }
    }

    #[test]
    fn sain_gradients_with_batch_statistics() {
        let mode = Mode {
            batch_norm: BatchNormMode::Batch,
            dropout_seed: None,
        };
        for f in sain_fixtures(4, &[2, 3, 4], mode).unwrap() {
            assert_certified(&check_sain(&f).unwrap());
        }
    }

    #[test]
    fn sain_gradients_with_dropout_masks() {
        for f in sain_fixtures(4, &[2, 4], Mode::train(11)).unwrap() {
            assert!(f.trace(&f.params).unwrap().examples[0].dropout_mask.is_some());
            assert_certified(&check_sain(&f).unwrap());
        }
    }

    #[test]
    fn sain_gradients_without_renormalization() {
        let mut fixtures = sain_fixtures(4, &[2, 3], certification_mode()).unwrap();
        for f in &mut fixtures {
            f.config.renormalize_topk = false;
            if f.kink_margin().unwrap() > KINK_MARGIN {
                assert_certified(&check_sain(f).unwrap());
            }
        }
    }

    #[test]
    fn sain_gradients_with_shared_gate_and_combined_only_loss() {
        for mut f in sain_fixtures(3, &[3], certification_mode()).unwrap() {
            f.config.loss_weights = [0.0, 0.0, 1.0];
            let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
            f.config.gate_shared = true;
            let shape = ModelShape {
                field_names: f.params.field_names.clone(),
                field_sizes: vec![3; 4],
                num_user_fields: 2,
                num_users: 4,
                num_items: 4,
            };
            f.params = SainParams::init(&shape, &f.config, &mut rng).unwrap();
            for m in f.params.tensors_mut() {
                m.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
            if f.kink_margin().unwrap() > KINK_MARGIN {
                assert_certified(&check_sain(&f).unwrap());
            }
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let f = &sain_fixtures(1, &[3], certification_mode()).unwrap()[0];
        let trace = f.trace(&f.params).unwrap();
        // Only the combined term is active and every target equals its score.
        let mut config = f.config.clone();
        config.loss_weights = [0.0, 0.0, 1.0];
        let ratings: Vec<f64> = trace.scores().iter().map(|s| s.combined).collect();
        let g = backward(&trace, &ratings, &f.params, &config).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn biasedmf_gradients() {
        for seed in 0..5 {
            assert_certified(&check_biasedmf(seed).unwrap());
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn trace_mismatch_is_reported() {
        let f = &sain_fixtures(1, &[2], certification_mode()).unwrap()[0];
        let trace = f.trace(&f.params).unwrap();
        let err = backward(&trace, &f.ratings[..2], &f.params, &f.config).unwrap_err();
        assert!(matches!(err, ModelError::TraceMismatch(_)));
    }
}
