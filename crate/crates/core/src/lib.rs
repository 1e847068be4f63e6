//! Sparsely activated multilingual multitask transformer encoders.
//!
//! Feed-forward and attention sub-layers are split into *skill modules*.
//! A manually defined task→skill matrix decides which modules run for each
//! task; all others are skipped in the forward pass and receive no gradient.
//!
//! ```text
//! tokens ─► embeddings ─► [ attention (dense | per-language Q/K/V)
//!                            ─► add & norm
//!                            ─► FFN (dense | skill bank mean-pool | top-2 MoE)
//!                            ─► add & norm ] × L ─► task head
//! ```

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod plot;
pub mod skills;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{finite_diff_grad, relative_error, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use params::{Owner, ParamId, ParameterStore};
pub use skills::{
    Perturbation, SkillId, SkillKind, SkillMask, SkillMatrix, TaskSpec, TaskType, Taxonomy,
};
pub use tensor::Tensor;
