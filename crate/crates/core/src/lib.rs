//! Venn and Venn-Abers calibration for general losses, Venn
//! multicalibration over finite-dimensional function classes, and the
//! conformal prediction intervals they induce.

pub mod calibrators;
pub mod conformal;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod multical;
pub mod par;
pub mod venn;

pub use error::{Error, Result};
