//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape records ops eagerly; [`Graph::backward`] sweeps it once in
//! reverse. Ops cover what convolutional audio codecs and GAN vocoders need:
//! 1-D/2-D and transposed convolutions, a fused LSTM layer, STFT and log-mel
//! front ends, and the usual elementwise and reduction primitives.

mod gemm;
pub mod gradcheck;
mod graph;
mod ops;
pub mod optim;
pub mod params;
pub mod spectral;
mod tensor;

pub use gemm::gemm;
pub use graph::{Gradients, Graph, Var};
pub use ops::{log_softmax_rows, sigmoid, Conv1dCfg, Conv2dCfg};
pub use optim::AdamW;
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
