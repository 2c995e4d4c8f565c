//! The class-activation network, its training loop and augmentation.

pub mod augment;
mod model;
mod train;

pub use augment::{augment, AugmentationConfig, TrainingSample};
pub use model::{ForwardPass, Gradients, Network, NetworkConfig};
pub use train::{
    accumulate_sample, fit_label_embedding, label_vector, train, IterationLog, LabelMode, LossMode, LrSchedule,
    Objective, Sgd, TrainOutcome, TrainingConfig,
};
