//! Optimization, evaluation and the experiment runners built on them.

mod batches;
mod config;
mod experiment;
mod metrics;
mod optim;
mod trainer;

pub use batches::{make_batches, TrainingPool};
pub use config::TrainConfig;
pub use experiment::*;
pub use metrics::{argmax, evaluate, mean, sign_test, std_dev, ClassScores, Metrics};
pub use optim::{adamw_step, adamw_step_model, lr_schedule, AdamHyper, OptimizerState, StepOutcome};
pub use trainer::*;
