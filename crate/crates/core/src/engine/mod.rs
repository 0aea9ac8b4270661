//! Training orchestration: configuration, alternating discriminator and
//! generator updates, checkpoints and test-time inference.

mod checkpoint;
mod config;
mod infer;
mod model;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{DefmapSource, TrainConfig};
pub use infer::{infer, infer_dir, score_dataset, write_outputs, InferOutput, Predictor};
pub use model::Model;
pub use train::{
    batch_indices, fit, fit_dataset, read_log, Batch, Dataset, FitOutput, LossRecord, TrainState, CHECKPOINT_FILE,
    LOG_FILE,
};
