//! Few-shot vibration fault diagnosis: a dual-path Fourier convolution
//! classifier trained jointly with a contrastive pair objective, fed by a
//! label-conditioned GAN whose discriminator doubles as a latent encoder.
//!
//! Everything numeric (tensors, FFT, gradients) is implemented in
//! [`tensor`]; the remaining modules build the signal pipeline on top.

pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod gan;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
