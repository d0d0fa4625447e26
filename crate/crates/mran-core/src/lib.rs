//! Multisource region attention network (MRAN).
//!
//! A compact differentiable tensor engine, the six-branch attention model
//! that jointly learns cross-source alignment and fine-grained
//! classification, an early-fusion baseline, a synthetic misaligned
//! multisource benchmark with known ground-truth offsets, and training /
//! evaluation machinery.

pub mod error;
pub mod kernels;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
