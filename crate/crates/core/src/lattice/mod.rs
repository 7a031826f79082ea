//! Permutohedral-lattice approximation of exponential-decay filtering.

pub mod calibration;
mod embed;
mod filter;
mod table;

pub use embed::{elevate, find_simplex, Elevation, LatticeKey, SimplexEmbedding};
pub use filter::{
    blur, blur_axis, lattice_filter_backward, lattice_filter_forward, slice, splat, BlurKernel, FilterContext, LatticeFilter, PointSet,
    BLUR_RADIUS,
};
pub use table::LatticeTable;
