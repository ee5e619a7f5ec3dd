//! LLaMA-style decoder stack with per-block bottleneck adapters.
//!
//! Block anatomy (pre-norm, no projection biases):
//!
//! ```text
//! h   = x + Attn(RMSNorm(x))
//! a   = Adapter(h)            (identity when adapters are disabled)
//! out = a + MLP(RMSNorm(a))
//! ```

mod config;
mod forward;
mod weights;

pub use config::{ModelConfig, PositionalMode};
pub use forward::{
    attention_heads, block_forward, block_forward_on, causal_attention, decode, embed_segments, mlp, model_forward_on,
    sequence_forward, visual_prefix, ForwardVars, Segment,
};
pub use weights::{init_weights, layout, BlockWeights, ModelWeights, ParamInfo, ParamKind};

use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("token id {id} is out of range for vocabulary size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("{what} has width {actual}, expected {expected}")]
    Width {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("targets: {0}")]
    Targets(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Config plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub loss: Option<f64>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let weights = init_weights(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Registers every parameter as a tape leaf. `trainable` decides
    /// `requires_grad`; the vision stubs are always frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&ParamInfo) -> bool) -> ModelWeights<Var> {
        self.weights.map(|info, t| {
            let rg = info.kind != ParamKind::VisionStub && trainable(info);
            tape.leaf(t.clone(), rg)
        })
    }

    /// Gradient-free forward. `prefix` holds projected visual embeddings
    /// `[n × hidden]`; `targets` align with `tokens`.
    pub fn forward(
        &self,
        prefix: Option<&Tensor>,
        tokens: &[usize],
        targets: Option<&[Option<usize>]>,
    ) -> Result<ModelOutput, ModelError> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, |_| false);
        let p = prefix.map(|t| tape.constant(t.clone()));
        let out = model_forward_on(&mut tape, &w, &self.config, p, tokens, targets)?;
        Ok(ModelOutput {
            logits: tape.value(out.logits).clone(),
            loss: out.loss.map(|l| tape.value(l).data()[0]),
        })
    }

    /// Prefix embeddings for patch features through the frozen Q-Former and
    /// the projection.
    pub fn visual_prefix(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, |_| false);
        let v = visual_prefix(&mut tape, &w, features)?;
        Ok(tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model {
        Model::init(ModelConfig::reference_toy(), 5).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = toy();
        let out = m.forward(None, &[1, 2, 3], None).unwrap();
        assert_eq!(out.logits.shape(), [3, 32]);
        assert!(out.loss.is_none());
    }

    #[test]
    fn rejects_out_of_range_token() {
        let err = toy().forward(None, &[1, 32], None).unwrap_err();
        assert_eq!(err, ModelError::TokenOutOfRange { id: 32, vocab: 32 });
    }

    #[test]
    fn rejects_overlong_sequence() {
        let tokens = vec![1; 17];
        assert!(matches!(
            toy().forward(None, &tokens, None),
            Err(ModelError::SeqTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn rejects_bad_prefix_width_and_targets() {
        let m = toy();
        let bad = Tensor::zeros(vec![2, 8]);
        assert!(matches!(
            m.forward(Some(&bad), &[1], None),
            Err(ModelError::Width { .. })
        ));
        assert!(matches!(
            m.forward(None, &[1, 2], Some(&[Some(1)])),
            Err(ModelError::Targets(_))
        ));
        assert!(matches!(
            m.forward(None, &[1, 2], Some(&[Some(40), None])),
            Err(ModelError::TokenOutOfRange { id: 40, .. })
        ));
    }

    #[test]
    fn zero_unembedding_gives_uniform_loss() {
        let mut m = toy();
        m.weights.unembed = Tensor::zeros(vec![16, 32]);
        let out = m.forward(None, &[1, 4, 9], Some(&[Some(4), Some(9), None])).unwrap();
        assert!((out.loss.unwrap() - (32f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_equals_language_model() {
        let m = toy();
        let empty = Tensor::zeros(vec![0, 16]);
        let a = m.forward(Some(&empty), &[1, 2, 3], None).unwrap();
        let b = m.forward(None, &[1, 2, 3], None).unwrap();
        assert!(a.logits.bitwise_eq(&b.logits));
    }

    #[test]
    fn absolute_positions_run() {
        let mut cfg = ModelConfig::reference_toy();
        cfg.positional_mode = PositionalMode::Absolute;
        let m = Model::init(cfg, 2).unwrap();
        let out = m.forward(None, &[1, 2, 3, 4], None).unwrap();
        assert_eq!(out.logits.shape(), [4, 32]);
    }

    #[test]
    fn vision_stubs_never_require_grad() {
        let m = toy();
        let mut tape = Tape::new();
        let w = m.bind(&mut tape, |_| true);
        assert!(!tape.requires_grad(w.vision.queries));
        assert!(!tape.requires_grad(w.vision.encoder_weight));
        assert!(tape.requires_grad(w.projection.weight));
    }
}
