//! Training, distillation, inference and evaluation for a 113-parameter
//! infrared/visible image fusion network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: NCHW tensors and forward/backward kernels
//! - [`vgg`]: frozen VGG-19 feature taps for perceptual losses
//! - [`nets`]: the teacher and student fusion networks and their weight files
//! - [`loss`]: distillation, intensity, gradient, perception and refresh losses
//! - [`refresh`]: per-sample best-output history scored by SSIM and GMSD
//! - [`metrics`]: fusion quality measures and dataset reports
//! - [`data`]: image loading, colour handling, patches and batching
//! - [`train`]: Adam and the two-phase teacher/student schedule
//! - [`cli`]: the `mmdrfuse` command line

pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod layer;
pub mod loss;
pub mod metrics;
pub mod refresh;
pub mod nets;
pub mod tensor;
pub mod train;
pub mod vgg;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
