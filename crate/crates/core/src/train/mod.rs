//! Loss, optimizers, the training loop, count evaluation and ablations.

mod ablation;
mod eval;
mod loss;
mod optim;
mod trainer;

pub use ablation::{ablation_run, AblationConfig, AblationRow, AblationTable, Variant};
pub use eval::{evaluate, EvalResult, ImageCount, Predictor};
pub use loss::pixel_loss;
pub use optim::{Optimizer, OptimizerKind};
pub use trainer::{best_checkpoint_path, split_indices, train, LogRow, TrainConfig, TrainReport};
