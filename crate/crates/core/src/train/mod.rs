//! Objective, optimizer, schedule, the training loop and stream expansion.

pub mod expand;
pub mod loss;
pub mod optim;
pub mod run;
pub mod schedule;

pub use expand::{expand_stream, expansion_config, ExpandMode, Expansion};
pub use loss::{total_loss, LossParts, LossWeights, Targets};
pub use optim::Sgd;
pub use run::{split, train_run, EpochLog, RunFiles, TrainConfig, Trainer};
pub use schedule::LrSchedule;
