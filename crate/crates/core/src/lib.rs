//! Context guided correlation volumes for RAFT-style optical flow.
//!
//! The crate builds the all-pairs correlation volume of two feature maps,
//! gates it with a cross-frame attention map computed from context features,
//! lifts it with a scalar-weighted context correlation, and feeds the result
//! through a pooled pyramid and a small recurrent refiner. Everything has a
//! hand-written reverse pass that is checked against finite differences.

pub mod cgcv;
pub mod checkpoint;
pub mod corr;
pub mod counters;
pub mod error;
pub mod encoder;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod refine;
pub mod tensor;

pub use error::{CgcvError, Result};
