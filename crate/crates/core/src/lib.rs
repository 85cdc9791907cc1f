//! Cross-view sequential image localization.
//!
//! A ground-level image sequence is localized inside one satellite patch.
//! Each frame is fused with the satellite tokens by attention, a temporal
//! attention block carries evidence from the previous frame, and the heads
//! pick a grid cell plus an in-cell offset.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geo;
pub mod io;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
