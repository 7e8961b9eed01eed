//! Layered, mesh-anchored Gaussian splatting for articulated avatars.

pub mod deform;
pub mod editing;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod image;
pub mod io;
pub mod knn;
pub mod lifecycle;
pub mod losses;
pub mod procedural;
pub mod rasterizer;
pub mod scene;
pub mod sdf;
pub mod skinning;

pub use error::{Error, Result};
