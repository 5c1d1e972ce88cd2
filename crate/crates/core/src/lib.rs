//! Streaming 4D Gaussian splatting with low-rank adaptation of a tri-plane
//! deformation field.
//!
//! A scene is a set of 3D Gaussians plus a deformation module (tri-plane
//! features, per-Gaussian embeddings and a small decoder). Chunk 0 of a video
//! is fitted in full and streamed as a base chunk; every later chunk only
//! trains and streams rank-λ factor updates to the plane channels.

pub mod codec;
pub mod dataset;
pub mod deform;
pub mod gaussian;
pub mod image;
pub mod lowrank;
pub mod model;
pub mod par;
pub mod raster;
pub mod sh;
pub mod train;

pub use gaussian::{Camera, GaussianPrimitive};
pub use par::Execution;
pub use raster::{rasterize, rasterize_backward, RenderOutput, RenderSettings};
