//! Optimizers, learning-rate schedule and the training loop.

mod config;
mod optim;
mod train;
#[cfg(test)]
mod tests;

pub use config::{DataConfig, TrainConfig};
pub use optim::{early_stop, grad_norm, lr_schedule, optimizer_step, Moments, OptimizerConfig, OptimizerKind};
pub use train::{StepReport, TrainState, Trainer};
