//! Inverse-consistent, adversarially trained, patch-based 3D deformable
//! registration with tiled whole-volume inference.

pub mod cli;
pub mod error;
pub mod infer;
pub mod eval;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volio;
pub mod warp;

pub use error::{Error, Result};
