//! Culling structures for bounded kernels: a KD-tree queried with oriented
//! boxes, and orthographic binning for regular planar grids.

pub mod binning;
pub mod kdtree;
pub mod obb;

pub use binning::{binning_neighborhood, orthographic_binning, BinLayout};
pub use kdtree::{kd_build, kd_query_obb, KdTree};
pub use obb::{support_obb, Obb};
