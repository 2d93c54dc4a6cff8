//! A small, CPU-only, reverse-mode CNN engine.
//!
//! Provides exactly the pieces a pair of fully convolutional detection
//! networks need: multi-channel convolution with per-channel kernels,
//! 2x2 max pooling, ReLU/PReLU, batch normalization, inverted dropout,
//! Euclidean and softmax cross-entropy losses, SGD with Nesterov momentum,
//! Adam, and a binary checkpoint format.

pub mod activation;
pub mod checkpoint;
pub mod conv;
pub mod dropout;
pub mod error;
pub mod layer;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use activation::ActivationKind;
pub use checkpoint::Checkpoint;
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer, Padding};
pub use error::{EngineError, Result};
pub use layer::{Layer, NamedTensor, Sequential};
pub use loss::{euclidean_loss, softmax_channels, softmax_xent_loss, LossKind};
pub use norm::Mode;
pub use optim::{OptimizerKind, OptimizerState, PlateauSchedule};
pub use param::Param;
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};
