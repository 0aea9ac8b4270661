//! Minimal neural-network toolkit: tensors, a reverse-mode autodiff tape,
//! convolution layers and the Adam optimizer.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{leaky_gain, Conv2d, ConvBlock, LEAKY_SLOPE};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
