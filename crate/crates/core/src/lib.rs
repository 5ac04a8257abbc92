//! Molecular graph encodings with bond- and dihedral-angle line graphs,
//! an edge-gated graph convolution spectroscopy model, single-Gaussian
//! peak fitting and continuous shape measures.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod graphs;
pub mod model;
pub mod nn;
pub mod shape;
pub mod spectra;
pub mod training;

pub use error::{Error, Result};
