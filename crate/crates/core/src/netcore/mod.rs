//! Minimal differentiable compute core: tensors, conv/linear layers with
//! reverse-mode gradients, the detector network, gradient reversal, EMA
//! weight tracking, SGD with momentum, and the checkpoint codec.

mod checkpoint;
mod layers;
mod network;
mod sgd;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{sigmoid, ActRecord, Conv2d, ConvRecord, LeakyRelu, Linear, LinearRecord};
pub use network::{grl_backward, grl_forward, ArchConfig, ForwardRecord, Network};
pub use sgd::SgdMomentum;
pub use tensor::{ema_update, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("corrupt checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
