//! Semi-supervised domain adaptation for RGB to hyperspectral reconstruction.
//!
//! A mean-teacher training loop with two spectral priors: density-guided
//! block masking of the student's RGB input ([`sdm`]) and alignment of
//! predicted spectra to an endmember bank ([`sera`]).

pub mod cli;
pub mod datagen;
pub mod error;
pub mod hsi;
pub mod metrics;
pub mod model;
pub mod sdm;
pub mod seed;
pub mod sera;
pub mod trainer;

pub use error::{Error, Result};
