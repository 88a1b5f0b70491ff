//! Multi-modal 3D affine registration with a differentiable, Parzen-windowed
//! correlation ratio.

pub mod affine;
pub mod cli;
pub mod document;
pub mod error;
pub mod eval;
pub mod nifti;
pub mod optimizer;
pub mod pyramid;
pub mod similarity;
pub mod synth;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
