//! Differentiable rendering of point clouds through grids of parameterized
//! sensor cells, with analytic gradients and spatial acceleration.

pub mod accel;
pub mod attenuation;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod kernels;
pub mod optim;
pub mod renderer;
pub mod scene;

pub use error::{Error, Result};
