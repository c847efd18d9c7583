//! Minimal reverse-mode differentiation for small dense networks.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use layers::{forward_dense, Activation, DenseLayer, Mlp};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{dot, matmul_t, relu, sigmoid, Tensor};

pub use tape::neighbour_mean;
