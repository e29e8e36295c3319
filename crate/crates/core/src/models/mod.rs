//! Micro surrogate networks.
//!
//! The student is a depthwise-separable residual CNN; teachers are wider
//! residual CNNs that put most of their capacity into a full-convolution
//! residual block at the lowest resolution. Both expose three stage taps for
//! feature distillation.

mod checkpoint;
mod network;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{Arch, Block, ForwardOutput, Network, NetworkSpec, Param, TeacherPreset};

use thiserror::Error;

use crate::nn::NnError;

pub const N_CLASSES: usize = 10;
pub const DEFAULT_STUDENT_WIDTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
