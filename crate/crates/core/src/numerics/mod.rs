//! Dense tensors, reverse-mode differentiation, parameter storage and Adam.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, check_param_gradients, GradCheck, GradInput, GradProbe, ParamProbe};
pub use graph::{Backward, Graph, NodeId};
pub use ops::{cross_entropy, softmax};
pub use params::{AdamConfig, Gradients, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
