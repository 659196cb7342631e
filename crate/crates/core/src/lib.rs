//! One-step rectified-flow image fusion.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`fft`], [`image`], [`imageio`]: dense arithmetic, the
//!   radix-2 FFT and image primitives.
//! * [`autodiff`]: a reverse-mode tape with an Adam optimizer.
//! * [`flow`]: rectified-flow interpolation, loss, velocity models and the
//!   deterministic Euler sampler.
//! * [`guidance`]: fusion-prior guidance injected into the sampler.
//! * [`codec`]: the latent autoencoder and its two training stages.
//! * [`metrics`]: the fusion evaluation metrics.
//! * [`checkpoint`], [`config`], [`synth`]: persistence, run configuration
//!   and synthetic datasets.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod fft;
pub mod flow;
pub mod guidance;
pub mod image;
pub mod imageio;
pub mod metrics;
pub mod par;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{ColorSpace, Image};
pub use tensor::{CTensor, Tensor};
