//! Detector-free image matching with adaptive-span global-local cross
//! attention.
//!
//! The crate contains a small reverse-mode autodiff core ([`autograd`]), the
//! network pieces (backbone, positional encoding, flow regression, attention
//! kernels, GLA stack, matcher), a synthetic homography data generator and the
//! training/evaluation harness behind the `aspan` binary.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gla;
pub mod harness;
pub mod instrument;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autograd::{grad_check, DualTensor, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
