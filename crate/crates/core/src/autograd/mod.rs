//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
pub mod gradcheck;
mod ops;
mod tape;

pub use adam::Adam;
pub use tape::{CustomOp, Tape, Var};
