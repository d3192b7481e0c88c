//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! optimizers and checkpoint format used by the training regimes.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, params_hash, read_checkpoint, save_checkpoint, sha256_hex, write_checkpoint,
    CheckpointHeader, TensorEntry, CHECKPOINT_FORMAT,
};
pub use gradcheck::{finite_difference_check, max_relative_error, relative_error};
pub(crate) use graph::sigmoid;
pub use graph::{backward, evaluate, Bindings, ComputeGraph, ForwardValues, Node, NodeId, Op, Tape};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{sgd_step, GradientMap, ParamSet};
pub use tensor::Tensor;
