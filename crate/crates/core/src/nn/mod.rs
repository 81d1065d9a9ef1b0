//! Minimal differentiable-computation engine: dense and small convolutional
//! layers over a recorded tape, losses, optimizers and a gradient auditor.

pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use gradcheck::{audit, grad_check, GradReport, Parameterized, FD_STEP};
pub use loss::{log_softmax, mse, mse_grad, softmax, softmax_entropy, softmax_entropy_grad};
pub use network::{LayerSpec, Network, Param};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use tensor::Tensor;
