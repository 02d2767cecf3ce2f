//! Blind image denoising with a variational latent prior.
//!
//! The denoiser is conditioned on a 4-channel latent code `c` produced by a
//! convolutional encoder from the noisy image; a decoder regularizes `c` by
//! reconstructing the noisy image, with a KL term against a unit Gaussian
//! prior and a spectrally-normalized patch discriminator on the
//! reconstruction. All networks are trained jointly from the summed
//! objective; see the module docs for the individual pieces.

pub mod error;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
