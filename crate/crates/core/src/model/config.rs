use crate::vision::VisionConfig;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    #[default]
    Rotary,
    /// Learned position table added to the input embeddings.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub mlp_inner: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub adapters_enabled: bool,
    #[serde(default)]
    pub positional_mode: PositionalMode,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub vision: VisionConfig,
}

fn default_eps() -> f64 {
    crate::tensor::RMS_NORM_EPS
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// 2 blocks, hidden 16, 2 heads, vocab 32, adapters on.
    pub fn reference_toy() -> Self {
        Self {
            n_blocks: 2,
            hidden: 16,
            n_heads: 2,
            mlp_inner: 64,
            vocab_size: 32,
            max_seq: 16,
            adapters_enabled: true,
            positional_mode: PositionalMode::Rotary,
            norm_eps: default_eps(),
            rope_base: default_rope_base(),
            vision: VisionConfig::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_blocks == 0
            || self.hidden == 0
            || self.n_heads == 0
            || self.mlp_inner == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return bad("all sizes must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if !self.hidden.is_multiple_of(crate::adapter::BOTTLENECK_DIVISOR) {
            return bad(format!("hidden {} is not divisible by 4", self.hidden));
        }
        if self.positional_mode == PositionalMode::Rotary && !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "rotary positions need an even head size, got {}",
                self.head_dim()
            ));
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            return bad(format!("norm_eps must be non-negative, got {}", self.norm_eps));
        }
        self.vision.validate().map_err(|e| ModelError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_toy_is_valid() {
        ModelConfig::reference_toy().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_hidden() {
        let mut c = ModelConfig::reference_toy();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::reference_toy();
        c.hidden = 18;
        c.n_heads = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_defaults_fill_optional_fields() {
        let json = r#"{"n_blocks":1,"hidden":8,"n_heads":2,"mlp_inner":16,
            "vocab_size":10,"max_seq":8,"adapters_enabled":false}"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.positional_mode, PositionalMode::Rotary);
        assert_eq!(c.norm_eps, 1e-6);
        assert_eq!(c.vision, VisionConfig::default());
    }
}
