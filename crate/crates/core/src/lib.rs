//! Vehicle pose and shape reconstruction toolkit.
//!
//! The crate covers the non-learned half of monocular car reconstruction:
//! a divide-and-conquer PCA shape space over fixed-topology meshes, pinhole
//! projection and 6DoF pose geometry, the geometric and scene-level training
//! losses with hand-derived gradients, a Levenberg-Marquardt pose/shape
//! fitter, a binary-mask rasterizer, and A3DP-style evaluation.

pub mod cars;
pub mod error;
pub mod eval;
pub mod fitter;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod mesh;
pub mod raster;
pub mod scenegen;
pub mod shape_space;

pub use error::{Error, Result};
