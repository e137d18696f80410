//! Sparse video adversarial attacks that exchange information between a
//! clean video and a learned target tensor inside an invertible
//! spatio-temporal network.

pub mod attack;
pub mod baselines;
pub mod checkpoint;
pub mod coupling;
pub mod error;
pub mod gtvl;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod victim;
pub mod video_io;
pub mod wavelet3d;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
