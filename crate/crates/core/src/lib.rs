//! Differentiable Gaussian-splatting engine built around hierarchical nexus
//! kernels.
//!
//! Kernels anchor groups of Gaussian primitives through learnable offsets and
//! shared MLP heads; a light-decoupling mapper turns raw colors into
//! per-image lighting-conditioned colors, and a Gaussian-wise uncertainty
//! head renders a per-pixel uncertainty map that down-weights occluded pixels
//! in the photometric loss. The whole pipeline — projection, tile
//! rasterization, losses — has hand-written exact gradients and trains on the
//! CPU.

pub mod appearance;
pub mod error;
pub mod img;
pub mod io;
pub mod losses;
pub mod math;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
