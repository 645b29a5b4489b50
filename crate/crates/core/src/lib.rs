//! Semi-supervised volumetric segmentation with a mean-teacher, boundary-aware
//! contrastive distillation and signed-distance supervision.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset_io;
pub mod edt;
pub mod eval;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sdm;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use grid::{Dims, Grid3};
