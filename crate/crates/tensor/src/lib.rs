//! Dense tensors and a reverse-mode tape covering the operators needed by
//! partial-attention convolution networks: grouped convolution, batch
//! normalization, pointwise activations, softmax, per-channel statistics,
//! broadcasting arithmetic, batched matmul and soft-target cross-entropy.
//!
//! Layout is `(n, c, h, w)` row-major. Both `f32` and `f64` are supported
//! through [`Element`].

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::activation::Activation;
pub use ops::conv::{conv2d_forward, conv_out_len, Conv2dParams};
pub use ops::norm::{BatchNormConfig, RunningStats};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
