//! Multicoil k-space subsampling laboratory.
//!
//! Retrospective rectilinear and radial subsampling of simulated multicoil
//! k-space, classical MAP and recurrent-inference reconstructions, and the
//! PSNR / SSIM / VIF metrics used to compare them.

pub mod classical;
pub mod error;
pub mod fft;
pub mod forward;
pub mod image;
pub mod metrics;
pub mod phantom;
pub mod rim;
pub mod sampling;
pub mod seed;
pub mod tensorfile;

pub use error::{LabError, Result};
pub use image::{ComplexImage2D, RealImage2D};
pub use num_complex::Complex64;
