//! A small LLaMA-style decoder with bottleneck image adapters, a selective
//! freeze policy, frozen vision stubs, two-stage training and a rubric
//! scoring engine.

pub mod adapter;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod policy;
pub mod rubric;
pub mod tensor;
pub mod train;
pub mod vision;

pub use adapter::{adapter_forward, adapter_param_count, AdapterWeights};
pub use config::{Profile, RunConfig};
pub use data::{Dataset, Example, GenerateOptions, Vocab};
pub use model::{Model, ModelConfig, ModelError, ModelWeights, ParamInfo, ParamKind};
pub use policy::{build_policy, ParamPolicy, Preset};
pub use rubric::{render_report, ScoreSheet};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use train::{Checkpoint, LossRecord, Stage, TrainConfig, TrainError};
pub use vision::VisionConfig;
