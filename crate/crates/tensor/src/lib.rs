//! Minimal dense-tensor engine for the segmentation models in this workspace.
//!
//! Tensors are plain row-major buffers. Differentiable computation is recorded
//! on a [`Tape`], which replays it in reverse to produce gradients for every
//! leaf marked as requiring them. Layers with trainable weights live in [`nn`]
//! and the Adam optimizer in [`optim`]. [`gradcheck`] holds the central
//! finite-difference checker used to validate every backward rule.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Mode, Module, Param, ParamId, ParamVisitor};
pub use optim::{Adam, AdamConfig};
pub use real::Real;
pub use tape::{ConvSpec, CustomBackward, Tape, Var};
pub use tensor::Tensor;
