//! Joint supervised and pseudo-supervised optimisation.

pub mod augment;
mod config;
pub mod loss;
mod run;
pub mod schedule;
mod step;

pub use config::{Seeds, TrainConfig};
pub use loss::{bce_loss, combined_loss, dice_loss};
pub use run::{train, EpochRecord, TrainData, TrainOutcome, BEST_CHECKPOINT, FINAL_CHECKPOINT, HISTORY_FILE};
pub use schedule::{poly_lr, Sgd};
pub use step::{
    pseudo_target, supervised_grads, train_step, unsupervised_grads, LabeledItem, StepGrads, StepRecord, TrainState,
    UnlabeledItem,
};
