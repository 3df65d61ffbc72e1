//! Decoder-only transformer with activation capture and intervention hooks.
//!
//! Pre-norm blocks (gain-only LayerNorm), learned absolute positions, GELU
//! MLP and an untied unembedding. Every forward pass records a full
//! [`ActivationCache`]; training differentiates the uninterventioned pass.

mod backward;
mod cache;
pub mod checkpoint;
mod config;
mod forward;
mod params;
mod plan;
mod train;

pub use backward::{backward, cross_entropy};
pub use cache::{ActivationCache, LayerCache};
pub use config::ModelConfig;
pub use forward::{argmax, forward, forward_tokens, RunResult};
pub use params::{Layout, Params, TensorId};
pub use plan::{
    Channel, EdgeMask, HeadOverride, InjectionSite, InterventionPlan, PlanManifest, ResidualAddition,
    RowOverride,
};
pub(crate) use train::central_difference;
pub use train::{
    accuracy, batch_loss, batch_loss_and_grad, grad_check, loss_targets, sample_training_batch, train,
    GradCheckReport, LossPositions, TrainHyper, TrainOutput,
};
