//! Post-processing toolkit for diffusion tensor cardiac MR frame stacks.
//!
//! The pipeline runs crop → normalize → groupwise PCA denoising →
//! diffeomorphic B-spline registration → log-linear tensor fitting →
//! quality metrics (negative eigenvalues, helix-angle line profiles).
//! A synthetic annular phantom with known ground truth drives the tests.

pub mod error;
pub mod denoise;
pub mod imaging;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod tensor;

pub use error::{Error, Result};
