//! Two-stage training: caption alignment, then instruction tuning. Both
//! stages use AdamW under a linear-warmup cosine schedule and update only
//! what the parameter policy marks trainable.

pub mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Section};
pub use optim::{adamw_step, Moment, Moments};
pub use schedule::lr_at;

use crate::data::{DataError, Example, BOS};
use crate::model::{sequence_forward, visual_prefix, Model, ModelConfig, ModelError, Segment};
use crate::policy::ParamPolicy;
use crate::tensor::{Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} is past the schedule end {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint is for stage {found}, expected {expected}")]
    StageMismatch { expected: Stage, found: Stage },
    #[error("loss became non-finite at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    Stage1,
    #[serde(rename = "stage2")]
    Stage2,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Stage::Stage1),
            2 => Some(Stage::Stage2),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            _ => Err(format!("unknown stage `{s}` (expected 1 or 2)")),
        }
    }
}

/// Optimizer and schedule settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_lr: f64,
    pub weight_decay: f64,
    pub max_epochs: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub iters_per_epoch: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds instruction sampling in stage 2.
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale values.
    pub fn paper() -> Self {
        Self {
            init_lr: 1e-7,
            min_lr: 8e-7,
            warmup_lr: 1e-8,
            weight_decay: 0.05,
            max_epochs: 2,
            batch_size: 32,
            warmup_steps: 5000,
            iters_per_epoch: 5000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }

    /// Small-model stage-1 profile: 50 steps over batches of 4.
    pub fn toy_stage1() -> Self {
        Self {
            init_lr: 5e-2,
            min_lr: 5e-3,
            warmup_lr: 5e-3,
            max_epochs: 1,
            batch_size: 4,
            warmup_steps: 5,
            iters_per_epoch: 50,
            ..Self::paper()
        }
    }

    /// Small-model stage-2 profile: 30 steps.
    pub fn toy_stage2() -> Self {
        Self {
            warmup_steps: 3,
            iters_per_epoch: 30,
            ..Self::toy_stage1()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.max_epochs.saturating_mul(self.iters_per_epoch)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("init_lr", self.init_lr),
            ("min_lr", self.min_lr),
            ("warmup_lr", self.warmup_lr),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.total_steps() == 0 {
            return bad("max_epochs and iters_per_epoch must be positive".into());
        }
        if self.warmup_steps >= self.total_steps() {
            return bad(format!(
                "warmup_steps {} must be below the total step count {}",
                self.warmup_steps,
                self.total_steps()
            ));
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON of both configs.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    Sha256::digest(&json).into()
}

/// How an example becomes a training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Template {
    /// `prefix ‖ caption`, loss on every caption token after BOS.
    Caption,
    /// `BOS ‖ instruction ‖ prefix ‖ response`, loss on the response only.
    /// The instruction is drawn from `pool` per example and step.
    Instruction { pool: Vec<Vec<usize>> },
}

/// Per-position next-token targets for the caption template.
pub fn caption_targets(n_prefix: usize, caption: &[usize]) -> Vec<Option<usize>> {
    let mut t = vec![None; n_prefix];
    t.extend(caption.iter().skip(1).map(|&c| Some(c)));
    if !caption.is_empty() {
        t.push(None);
    }
    t
}

/// Per-position targets for the instruction template: the response is the
/// caption without BOS, and only response tokens are predicted.
pub fn instruction_targets(instr_len: usize, n_prefix: usize, response: &[usize]) -> Vec<Option<usize>> {
    let mut t = vec![None; 1 + instr_len + n_prefix + response.len()];
    let start = 1 + instr_len + n_prefix;
    for (i, &r) in response.iter().enumerate() {
        // Token at position p is predicted from position p - 1.
        t[start + i - 1] = Some(r);
    }
    t
}

/// Instruction indices for one batch, reproducible from `(seed, step)`.
pub fn instruction_draws(seed: u64, step: u64, batch: usize, pool_len: usize) -> Vec<usize> {
    if pool_len == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch).map(|_| rng.random_range(0..pool_len)).collect()
}

/// Dataset positions of the examples in batch `step`.
pub fn batch_indices(step: u64, batch: usize, n: usize) -> Vec<usize> {
    (0..batch)
        .map(|j| ((step as u128 * batch as u128 + j as u128) % n as u128) as usize)
        .collect()
}

/// Builds the loss of one example on `tape` with weights bound under
/// `policy`. Returns the loss var and the bound weights.
pub fn example_loss(
    tape: &mut Tape,
    w: &crate::model::ModelWeights<crate::tensor::Var>,
    cfg: &ModelConfig,
    example: &Example,
    template: &Template,
    instruction: Option<&[usize]>,
) -> Result<crate::tensor::Var, TrainError> {
    let prefix = visual_prefix(tape, w, &example.features)?;
    let n_prefix = tape.value(prefix).shape()[0];
    let out = match template {
        Template::Caption => {
            let targets = caption_targets(n_prefix, &example.caption);
            let segs = [Segment::Visual(prefix), Segment::Text(&example.caption)];
            sequence_forward(tape, w, cfg, &segs, Some(&targets))?
        }
        Template::Instruction { .. } => {
            let instr = instruction.unwrap_or(&[]);
            let mut head = Vec::with_capacity(1 + instr.len());
            head.push(BOS);
            head.extend_from_slice(instr);
            let response = example.caption.strip_prefix(&[BOS]).unwrap_or(&example.caption);
            let targets = instruction_targets(instr.len(), n_prefix, response);
            let segs = [Segment::Text(&head), Segment::Visual(prefix), Segment::Text(response)];
            sequence_forward(tape, w, cfg, &segs, Some(&targets))?
        }
    };
    out.loss
        .ok_or_else(|| TrainError::Model(ModelError::Targets("no loss".into())))
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
}

/// CSV with header `step,stage,lr,loss`.
pub fn write_loss_csv<W: io::Write>(records: &[LossRecord], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| TrainError::Io(io::Error::other(e)))?;
    }
    if records.is_empty() {
        w.write_record(["step", "stage", "lr", "loss"])
            .map_err(|e| TrainError::Io(io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Model plus optimizer state at a point in one stage's schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub moments: Moments,
    /// Optimizer steps taken in this stage.
    pub step: u64,
    pub stage: Stage,
}

impl TrainState {
    pub fn new(model: Model, stage: Stage) -> Self {
        Self {
            model,
            moments: Moments::default(),
            step: 0,
            stage,
        }
    }

    pub fn checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            &self.moments,
            self.step,
            self.stage,
            config_digest(&self.model.config, train),
        )
    }

    /// Resumes from a checkpoint written under the same configs.
    pub fn resume(ckpt: &Checkpoint, model: &ModelConfig, train: &TrainConfig) -> Result<Self, TrainError> {
        if ckpt.config_digest != config_digest(model, train) {
            return Err(CheckpointError::ConfigMismatch.into());
        }
        Ok(Self {
            model: ckpt.to_model(model)?,
            moments: ckpt.moments.clone(),
            step: ckpt.step,
            stage: ckpt.stage,
        })
    }
}

/// Drives one stage.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub policy: &'a ParamPolicy,
    pub examples: &'a [Example],
    pub template: Template,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &'a TrainConfig,
        policy: &'a ParamPolicy,
        examples: &'a [Example],
        template: Template,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if examples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if let Template::Instruction { pool } = &template {
            if pool.is_empty() {
                return Err(TrainError::Config("instruction pool is empty".into()));
            }
        }
        Ok(Self {
            config,
            policy,
            examples,
            template,
        })
    }

    /// Mean loss and accumulated gradients (trainable paths only) for the
    /// batch at `step`, without updating anything.
    pub fn batch_gradients(&self, model: &Model, step: u64) -> Result<(f64, Vec<(String, Tensor)>), TrainError> {
        let b = self.config.batch_size;
        let idx = batch_indices(step, b, self.examples.len());
        let draws = match &self.template {
            Template::Instruction { pool } => instruction_draws(self.config.seed, step, b, pool.len()),
            Template::Caption => Vec::new(),
        };
        let mut total = 0.0;
        let mut acc: Vec<(String, Tensor)> = Vec::new();
        for (j, &i) in idx.iter().enumerate() {
            let mut tape = Tape::new();
            let w = model.bind(&mut tape, |info| self.policy.allows(info));
            let instr = match &self.template {
                Template::Instruction { pool } => Some(pool[draws[j]].as_slice()),
                Template::Caption => None,
            };
            let loss = example_loss(&mut tape, &w, &model.config, &self.examples[i], &self.template, instr)?;
            total += tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            if acc.is_empty() {
                for (info, v) in w.entries() {
                    if tape.requires_grad(*v) {
                        let zero = Tensor::zeros(tape.value(*v).shape().to_vec());
                        acc.push((info.path, zero));
                    }
                }
            }
            let vars: Vec<_> = w
                .entries()
                .into_iter()
                .filter(|(_, v)| tape.requires_grad(**v))
                .map(|(_, v)| *v)
                .collect();
            for ((_, sum), v) in acc.iter_mut().zip(vars) {
                if let Some(g) = grads.get(v) {
                    for (s, d) in sum.data_mut().iter_mut().zip(g.data()) {
                        *s += d;
                    }
                }
            }
        }
        let inv = 1.0 / b as f64;
        for (_, g) in &mut acc {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        Ok((total * inv, acc))
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&self, state: &mut TrainState) -> Result<LossRecord, TrainError> {
        let total = self.config.total_steps();
        if state.step >= total {
            return Err(TrainError::StepOutOfRange {
                step: state.step,
                total,
            });
        }
        let lr = lr_at(state.step, total, self.config)?;
        let (loss, grads) = self.batch_gradients(&state.model, state.step)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite(state.step));
        }
        let t = state.step + 1;
        for (path, g) in grads {
            let p = state
                .model
                .weights
                .get_mut(&path)
                .ok_or_else(|| TrainError::Shape(format!("unknown parameter `{path}`")))?;
            let m = state
                .moments
                .entries
                .entry(path)
                .or_insert_with(|| Moment::zeros_like(p));
            adamw_step(p, &g, m, t, lr, self.config)?;
        }
        let rec = LossRecord {
            step: state.step,
            stage: state.stage,
            lr,
            loss,
        };
        state.step = t;
        Ok(rec)
    }

    /// Steps until `end` (clamped to the schedule end).
    pub fn run_until(&self, state: &mut TrainState, end: u64) -> Result<Vec<LossRecord>, TrainError> {
        let end = end.min(self.config.total_steps());
        let mut trace = Vec::new();
        while state.step < end {
            trace.push(self.step(state)?);
        }
        Ok(trace)
    }

    pub fn run(&self, state: &mut TrainState) -> Result<Vec<LossRecord>, TrainError> {
        self.run_until(state, self.config.total_steps())
    }
}

/// Result of a completed stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub state: TrainState,
    pub trace: Vec<LossRecord>,
}

impl StageOutcome {
    pub fn checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        self.state.checkpoint(train)
    }
}

/// Caption alignment over `examples` from `model`.
pub fn train_stage1(
    model: Model,
    policy: &ParamPolicy,
    examples: &[Example],
    config: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    policy
        .check_covers(&model.weights)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let trainer = Trainer::new(config, policy, examples, Template::Caption)?;
    let mut state = TrainState::new(model, Stage::Stage1);
    let trace = trainer.run(&mut state)?;
    Ok(StageOutcome { state, trace })
}

/// Instruction tuning with fresh optimizer state and schedule.
pub fn train_stage2(
    model: Model,
    policy: &ParamPolicy,
    examples: &[Example],
    pool: Vec<Vec<usize>>,
    config: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    policy
        .check_covers(&model.weights)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let trainer = Trainer::new(config, policy, examples, Template::Instruction { pool })?;
    let mut state = TrainState::new(model, Stage::Stage2);
    let trace = trainer.run(&mut state)?;
    Ok(StageOutcome { state, trace })
}
