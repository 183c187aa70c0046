//! Optimization: Adam/AdamW, gradient skipping, EMA weights, input
//! normalization and the two KL phases.

mod config;
mod normalize;
mod objective;
mod optim;
mod state;
mod train;

pub use config::{KlPhase, TrainConfig};
pub use normalize::NormStats;
pub use objective::{kl_phase_loss, phase_policy, training_loss, TrainingLoss};
pub use optim::{
    adam_step, ema_update, grads_norm, maybe_skip_update, should_skip, UpdateOutcome, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use state::{init_rng, step_rng, TrainState};
pub use train::{
    apply_gradients, batch_gradients, batch_indices, evaluate, metrics_header, metrics_row, train, train_step,
    BatchGradients, StepLog, TrainOutputs, TrainSummary,
};
