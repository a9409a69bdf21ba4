//! A small deterministic reverse-mode autodiff engine for volumetric CNNs
//! and set attention.
//!
//! Graphs are recorded on a [`Tape`]; model weights live in a
//! [`ParamStore`] and are pulled onto the tape on first use. All kernels are
//! generic over [`Scalar`] so the same model runs in f32 for training and in
//! f64 for finite-difference checks.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{Stream, StreamKey};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
