//! Dense tensors, reverse-mode differentiation, the layer set used by the
//! micro networks, and the AdamW optimizer.

mod conv;
mod graph;
mod layers;
mod optim;
mod tensor;

pub use graph::{BatchStats, ConvGeometry, Graph, KlDirection, Var};
pub use layers::{ConvSpec, LayerKind, LayerSpec, Padding, ParamRole, BN_EPS};
pub use optim::{adamw_step, AdamState, AdamW, LrSchedule};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Whether batchnorm uses batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
