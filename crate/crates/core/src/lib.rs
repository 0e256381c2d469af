//! Invertible style normalization.
//!
//! The pipeline maps an image into a feature space with two invertible flow
//! blocks (each a padded checkerboard squeeze followed by five flow layers of
//! actnorm, invertible 1x1 convolution and subtractive coupling), standardizes
//! the features per sample and channel with instance normalization, and maps
//! the result back to image space through the exact inverse of the encoder.
//!
//! Module map:
//!
//! * [`numerics`]: NCHW tensors, a reverse-mode tape, finite-difference and
//!   dense-Jacobian oracles.
//! * [`flow`]: the invertible primitives with forward, inverse and log-det.
//! * [`invnorm`]: the composed model, instance normalization and checkpoints.
//! * [`harness`]: synthetic multi-domain data and leave-one-domain training.
//! * [`verify`]: round-trip, log-det and gradient check suites.

// `!(x > 0.0)` is how NaN gets rejected alongside out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod harness;
pub mod invnorm;
pub mod numerics;
pub mod verify;

pub use error::{Error, Result};
pub use flow::{FlowLayer, SqueezeRecord};
pub use invnorm::{InvNormConfig, InvNormModel, StyleStats};
pub use numerics::{Graph, Param, Real, Shape, Tensor, Var};
