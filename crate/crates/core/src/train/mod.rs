//! Losses, the AdamW optimizer and the two training phases.

mod loss;
mod optim;
mod trainer;

pub use loss::{loss_cls, loss_mse, loss_seq, step_loss, LossWeights, StepLoss};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use trainer::{train_baseline, train_sequential, LogRecord, LrSchedule, TrainConfig, TrainSummary};
