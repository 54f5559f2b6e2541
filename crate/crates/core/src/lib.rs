// `!(x > 0.0)` checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod reid;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
