use serde::{Deserialize, Serialize};

use super::ModelError;

/// Hyperparameters of the network. Defaults follow the reference setup:
/// d = 64, two heads, one attention layer, K = 8, dropout 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub top_k: usize,
    /// Renormalize the kept top-K weights of each row to sum to one.
    pub renormalize_topk: bool,
    pub dropout: f64,
    pub num_attention_layers: usize,
    /// Weights of the content, preference and combined squared-error terms.
    pub loss_weights: [f64; 3],
    /// One integration gate for both towers instead of one per side.
    pub gate_shared: bool,
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
    /// Half-width of the uniform init of embedding, CF and factor tables.
    pub table_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_heads: 2,
            top_k: 8,
            renormalize_topk: true,
            dropout: 0.1,
            num_attention_layers: 1,
            loss_weights: [1.0, 1.0, 1.0],
            gate_shared: false,
            batch_norm_eps: 1e-5,
            batch_norm_momentum: 0.1,
            table_init: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.dim == 0 || self.num_heads == 0 {
            return bad("dim and num_heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "dim {} not divisible by num_heads {}",
                self.dim, self.num_heads
            ));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_attention_layers != 1 {
            return bad("only one attention layer is supported".into());
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        if !(self.batch_norm_eps > 0.0) || !(0.0..=1.0).contains(&self.batch_norm_momentum) {
            return bad("batch norm eps must be positive, momentum in [0, 1]".into());
        }
        if !(self.table_init > 0.0 && self.table_init.is_finite()) {
            return bad(format!("table_init {} must be positive", self.table_init));
        }
        Ok(())
    }
}
