//! Graph attention with an exact-or-lattice global pathway.
//!
//! The crate bundles a small tape-based reverse-mode autodiff engine, a
//! permutohedral-lattice filter with analytic gradients, structural and
//! global Euclidean-distance attention, and the layer types built on them.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod autograd;
pub mod error;
pub mod graph;
pub mod lattice;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
