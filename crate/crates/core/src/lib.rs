//! Multi-instance 6D pose estimation: training-target encoding, losses,
//! PnP, hypothesis clustering and BOP-style evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bop;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod par;
pub mod pnp;
pub mod postprocess;

pub use error::{Error, Result};
pub use par::Execution;
