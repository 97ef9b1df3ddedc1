//! Differentiable projection of OCT B-scans into en-face projection maps.
//!
//! Layer boundaries are represented implicitly as per-column coordinates.
//! Points sampled uniformly between two boundaries are bilinearly resampled
//! from the B-scan and pooled into one line of the projection map, so the
//! whole path from network weights to projection map is differentiable.

pub mod autodiff;
pub mod dataset;
pub mod dpm;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod objective;
pub mod optim;
pub mod phantom;
pub mod predictors;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
