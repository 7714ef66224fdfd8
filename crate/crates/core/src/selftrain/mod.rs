//! Pseudo-label self-training of per-class task residuals.

mod adam;
mod objective;
mod pseudo;
mod trainer;

pub use adam::{adam_step, OptimizerState};
pub use objective::{adapted_anchors, loss_gradient, self_training_loss, TaskResidual};
pub use pseudo::{generate_pseudo_labels, PseudoLabelSet};
pub use trainer::{train_task_residual, EpochRecord, TrainConfig, TrainingLog, TrainingRun};

pub(crate) use objective::batch_loss_and_gradient;
pub(crate) use pseudo::check_gamma;
pub(crate) use trainer::epoch_loss_mean;
