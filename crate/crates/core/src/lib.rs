//! Spatially varying GGX materials and neural reflectance fitting.

pub mod encoding;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod gradcheck;
pub mod ggx;
pub mod math;
pub mod nbrdf;
pub mod radiometry;
pub mod raster;
pub mod render;
pub mod sampler;
pub mod sphere;
pub mod io;

pub use error::{Error, Result};
