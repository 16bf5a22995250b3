//! Rectified-flow super-resolution at desk scale: synthetic data, a small
//! time-conditioned velocity network, flow pretraining, HR-regularized
//! consistency distillation with fast-slow time pairing, and evaluation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod degrade;
pub mod distill;
mod error;
pub mod flow;
pub mod imageio;
pub mod metrics;
pub mod net;
pub mod sample;
pub mod sched;
pub mod seed;

pub use error::{Error, Result};
pub use ndgrad::{Scalar, Tensor};
