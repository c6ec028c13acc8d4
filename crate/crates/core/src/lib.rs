//! Dynamic scene reconstruction from a stationary monocular RGBD camera.
//!
//! A 4D scene is stored as a multiscale set of six factorized feature planes:
//! three space planes (xy, xz, yz) and three space-time planes (xt, yt, zt).
//! Features are fused by a Hadamard product, decoded to density and radiance by
//! two small MLPs, and rendered with emission-absorption compositing along rays
//! in normalized device coordinates. Training is depth supervised and draws rays
//! from occlusion and motion aware importance maps.
//!
//! Module map:
//! - [`field`]: feature planes, fused queries and plane regularizers.
//! - [`decoder`]: positional encoding and the geometry/color MLPs.
//! - [`renderer`]: cameras, NDC rays, quadrature and batched differentiable tracing.
//! - [`sampler`]: occlusion and motion importance maps and ray batch drawing.
//! - [`training`]: losses, Adam, the training loop and the gradient checker.
//! - [`scene_io`]: datasets, the synthetic scene, depth conversion, metrics and export.
//! - [`checkpoint`]: binary model checkpoints.

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod field;
pub mod renderer;
pub mod rng;
pub mod sampler;
pub mod scene_io;
pub mod training;

pub use error::{Error, Result};
