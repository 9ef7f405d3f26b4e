//! Minimal differentiable-computation layer: tensors, layer primitives,
//! reverse-mode gradients, SGD and the class-weighted cross-entropy.

mod checkpoint;
mod loss;
pub mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

use thiserror::Error;

use crate::data::ClassLabel;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use loss::{class_weights, softmax_rows, weighted_cross_entropy, ClassWeights};
pub use ops::{avg_pool2, conv1d, conv2d, conv_output_len, global_avg_pool, linear, relu};
pub use optim::Sgd;
pub use param::{ParamSet, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel {kernel} longer than padded input (length {len}, padding {pad})")]
    KernelTooLarge {
        kernel: usize,
        len: usize,
        pad: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no recorded graph for this value")]
    NoGraph,
    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("class {0} is absent")]
    MissingClass(ClassLabel),
    #[error("class weight for {0} must be finite and positive, got {1}")]
    BadWeight(ClassLabel, f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
