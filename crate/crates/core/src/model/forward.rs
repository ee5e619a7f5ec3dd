use super::{BlockWeights, ModelConfig, ModelError, ModelWeights, PositionalMode};
use crate::adapter::adapter_forward_on;
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::{project_on, qformer_on};

fn check_seq(seq: usize, cfg: &ModelConfig) -> Result<(), ModelError> {
    if seq > cfg.max_seq {
        return Err(ModelError::SeqTooLong {
            len: seq,
            max: cfg.max_seq,
        });
    }
    Ok(())
}

/// Multi-head causal self-attention up to (not including) the output
/// projection: heads concatenated, `[seq × hidden]`.
pub fn attention_heads(tape: &mut Tape, x: Var, w: &BlockWeights<Var>, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let (seq, width) = tape.value(x).matrix_dims("attention")?;
    check_seq(seq, cfg)?;
    if width != cfg.hidden {
        return Err(ModelError::Width {
            what: "attention input",
            expected: cfg.hidden,
            actual: width,
        });
    }
    let mut q = tape.matmul(x, w.wq)?;
    let mut k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    if cfg.positional_mode == PositionalMode::Rotary {
        q = tape.rope(q, cfg.n_heads, cfg.rope_base)?;
        k = tape.rope(k, cfg.n_heads, cfg.rope_base)?;
    }
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores, true)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    Ok(tape.concat_cols(&heads)?)
}

pub fn causal_attention(tape: &mut Tape, x: Var, w: &BlockWeights<Var>, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let heads = attention_heads(tape, x, w, cfg)?;
    Ok(tape.matmul(heads, w.wo)?)
}

/// Gated SiLU MLP: `(silu(u·W_gate) ⊙ (u·W_up)) · W_down`.
pub fn mlp(tape: &mut Tape, u: Var, w: &BlockWeights<Var>) -> Result<Var, ModelError> {
    let gate = tape.matmul(u, w.w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(u, w.w_up_mlp)?;
    let inner = tape.mul(gate, up)?;
    Ok(tape.matmul(inner, w.w_down_mlp)?)
}

/// One decoder block with the adapter between the attention residual and
/// the pre-MLP norm.
pub fn block_forward_on(tape: &mut Tape, x: Var, w: &BlockWeights<Var>, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let normed = tape.rms_norm(x, w.norm_attn_gain, cfg.norm_eps)?;
    let attn = causal_attention(tape, normed, w, cfg)?;
    let h = tape.add(x, attn)?;
    let a = match (&w.adapter, cfg.adapters_enabled) {
        (Some(ad), true) => adapter_forward_on(tape, h, ad)?,
        (None, false) => h,
        (None, true) => return Err(ModelError::Config("adapters enabled but weights missing".into())),
        (Some(_), false) => {
            return Err(ModelError::Config(
                "adapter weights present but adapters disabled".into(),
            ))
        }
    };
    let normed = tape.rms_norm(a, w.norm_mlp_gain, cfg.norm_eps)?;
    let m = mlp(tape, normed, w)?;
    Ok(tape.add(a, m)?)
}

pub(crate) fn bind_block(tape: &mut Tape, w: &BlockWeights) -> BlockWeights<Var> {
    let mut c = |t: &Tensor| tape.constant(t.clone());
    BlockWeights {
        norm_attn_gain: c(&w.norm_attn_gain),
        wq: c(&w.wq),
        wk: c(&w.wk),
        wv: c(&w.wv),
        wo: c(&w.wo),
        adapter: w.adapter.as_ref().map(|a| crate::adapter::AdapterWeights {
            w_down: c(&a.w_down),
            b_down: c(&a.b_down),
            w_up: c(&a.w_up),
            b_up: c(&a.b_up),
        }),
        norm_mlp_gain: c(&w.norm_mlp_gain),
        w_gate: c(&w.w_gate),
        w_up_mlp: c(&w.w_up_mlp),
        w_down_mlp: c(&w.w_down_mlp),
    }
}

/// Gradient-free single block.
pub fn block_forward(x: &Tensor, w: &BlockWeights, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = bind_block(&mut tape, w);
    let y = block_forward_on(&mut tape, xv, &wv, cfg)?;
    Ok(tape.value(y).clone())
}

/// A piece of the decoder input sequence.
#[derive(Debug, Clone, Copy)]
pub enum Segment<'a> {
    Text(&'a [usize]),
    /// Already-projected visual embeddings, `[n × hidden]`.
    Visual(Var),
}

/// Embeds text segments and splices visual segments in order.
pub fn embed_segments(
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    segments: &[Segment<'_>],
) -> Result<Var, ModelError> {
    let mut parts = Vec::with_capacity(segments.len());
    for seg in segments {
        match *seg {
            Segment::Text([]) => {}
            Segment::Text(ids) => {
                if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab: cfg.vocab_size,
                    });
                }
                parts.push(tape.gather_rows(w.token_embed, ids)?);
            }
            Segment::Visual(v) => {
                let (rows, width) = tape.value(v).matrix_dims("visual segment")?;
                if width != cfg.hidden {
                    return Err(ModelError::Width {
                        what: "visual prefix",
                        expected: cfg.hidden,
                        actual: width,
                    });
                }
                if rows > 0 {
                    parts.push(v);
                }
            }
        }
    }
    if parts.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    let seq = tape.value(x).shape()[0];
    check_seq(seq, cfg)?;
    match (cfg.positional_mode, w.pos_embed) {
        (PositionalMode::Absolute, Some(table)) => {
            let ids: Vec<usize> = (0..seq).collect();
            let pos = tape.gather_rows(table, &ids)?;
            Ok(tape.add(x, pos)?)
        }
        (PositionalMode::Absolute, None) => Err(ModelError::Config("absolute positions need a position table".into())),
        (PositionalMode::Rotary, _) => Ok(x),
    }
}

/// Runs all blocks, the final norm and the unembedding. Returns logits
/// `[seq × vocab]`.
pub fn decode(tape: &mut Tape, w: &ModelWeights<Var>, cfg: &ModelConfig, mut x: Var) -> Result<Var, ModelError> {
    if w.blocks.len() != cfg.n_blocks {
        return Err(ModelError::Config(format!(
            "{} blocks of weights for n_blocks {}",
            w.blocks.len(),
            cfg.n_blocks
        )));
    }
    for b in &w.blocks {
        x = block_forward_on(tape, x, b, cfg)?;
    }
    let x = tape.rms_norm(x, w.final_norm_gain, cfg.norm_eps)?;
    Ok(tape.matmul(x, w.unembed)?)
}

/// Frozen Q-Former over patch features followed by the trainable projection.
pub fn visual_prefix(tape: &mut Tape, w: &ModelWeights<Var>, features: &Tensor) -> Result<Var, ModelError> {
    let f = tape.constant(features.clone());
    let tokens = qformer_on(tape, f, w.vision.queries)?;
    Ok(project_on(tape, tokens, &w.projection)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub loss: Option<Var>,
}

/// Decoder over `segments`; `targets` (one per position, `None` excluded)
/// yields the mean next-token cross-entropy.
pub fn sequence_forward(
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    segments: &[Segment<'_>],
    targets: Option<&[Option<usize>]>,
) -> Result<ForwardVars, ModelError> {
    let x = embed_segments(tape, w, cfg, segments)?;
    let seq = tape.value(x).shape()[0];
    let logits = decode(tape, w, cfg, x)?;
    let loss = match targets {
        Some(t) => {
            if t.len() != seq {
                return Err(ModelError::Targets(format!(
                    "{} targets for a sequence of {seq}",
                    t.len()
                )));
            }
            if let Some(&id) = t.iter().flatten().find(|&&id| id >= cfg.vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            Some(tape.cross_entropy(logits, t)?)
        }
        None => None,
    };
    Ok(ForwardVars { logits, loss })
}

/// Visual prefix followed by text; `text_targets` align with the text
/// positions only, prefix positions never carry loss.
pub fn model_forward_on(
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    prefix: Option<Var>,
    tokens: &[usize],
    text_targets: Option<&[Option<usize>]>,
) -> Result<ForwardVars, ModelError> {
    let n_prefix = match prefix {
        Some(p) => tape.value(p).shape().first().copied().unwrap_or(0),
        None => 0,
    };
    let targets = match text_targets {
        Some(t) if t.len() != tokens.len() => {
            return Err(ModelError::Targets(format!(
                "{} targets for {} text tokens",
                t.len(),
                tokens.len()
            )))
        }
        Some(t) => {
            let mut all = vec![None; n_prefix];
            all.extend_from_slice(t);
            Some(all)
        }
        None => None,
    };
    let mut segments = Vec::with_capacity(2);
    if let Some(p) = prefix {
        segments.push(Segment::Visual(p));
    }
    segments.push(Segment::Text(tokens));
    sequence_forward(tape, w, cfg, &segments, targets.as_deref())
}
