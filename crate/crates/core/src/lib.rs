//! Differentiable polarisation and i-ToF sensor models, cross-modal depth
//! losses with hand-written adjoints, a per-pixel depth solver and a
//! four-camera bundle adjuster.

pub mod calib;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod grid;
pub mod image;
pub mod itof;
pub mod losses;
pub mod normals;
pub mod polarisation;
pub mod solver;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use grid::Grid;
