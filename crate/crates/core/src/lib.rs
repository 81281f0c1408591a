//! Deep non-negative matrix factorization networks.
//!
//! NMF layers run an iterative multiplicative h-dynamics in the forward pass
//! and are trained through a closed-form one-step backward rule that only
//! needs the layer's final state. Convolutional NMF (CNMF) blocks can be
//! followed by signed 1×1 convolutions that mix the non-negative features
//! locally.
//!
//! - [`tensor`]: dense tensors, matmul, im2col, grouped convolution, batch norm
//! - [`classic`]: reference Lee–Seung KL-NMF (unsupervised)
//! - [`layer`]: constrained weights, h-dynamics, dense and convolutional NMF
//! - [`backprop`]: approximate one-step backward, exact unrolled backward
//! - [`gradcheck`]: finite-difference checks of the layer derivatives
//! - [`network`]: block presets, model forward/backward, composite loss
//! - [`train`]: Adam, plateau schedule, augmentation, training loop
//! - [`io`]: CIFAR-10 binary, checkpoints, config files, CSV matrices
//! - [`bench`]: backward-pass time and memory comparison
//! - [`experiment`]: the small-subset CIFAR-10 training protocol

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backprop;
pub mod bench;
pub mod classic;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod layer;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
