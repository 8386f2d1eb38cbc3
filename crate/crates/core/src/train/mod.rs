//! Training: configuration, optimization, checkpointing, the training and
//! evaluation loops, and finite-difference gradient verification.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Checkpoint, CkptError};
pub use config::{ConfigError, TrainConfig};
pub use gradcheck::{GradReport, FD_STEP, GRAD_TOL, MODULES};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::lr_at;
pub use trainer::{
    evaluate_checkpoint, evaluate_model, load_checkpoint_model, train, EvalOutcome,
    PredictionRecord, TrainError, TrainSummary, FINAL_CKPT, METRICS_CSV,
};
