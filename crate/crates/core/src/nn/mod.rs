//! Minimal neural engine: dense matrices, a stacked bidirectional LSTM with
//! embedding and output heads, losses, reverse-mode gradients, Adam,
//! early stopping and checkpoints. Everything is `f64` and single-threaded.

pub mod checkpoint;
pub mod loss;
pub mod lstm;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{loss_cross_entropy, loss_mse};
pub use lstm::{lstm_cell_step, LstmCellParams};
pub use matrix::Matrix;
pub use model::{Batch, HeadKind, ModelInput, ModelSpec, SequenceModel};
pub use train::{train, DenseWindows, LossKind, TokenWindows, TrainConfig, TrainHistory, WindowData};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
