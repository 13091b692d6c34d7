//! Unsupervised multi-object scene decomposition.
//!
//! A recurrent attention network splits an image into `K` normalised masks;
//! a shared component VAE encodes each (image, mask) pair and decodes both the
//! component appearance and a reconstruction of its mask. Training minimises
//! a pixel-wise mixture likelihood plus two KL terms.

pub mod autograd;
pub mod component_vae;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod training;

pub use error::{MonetError, Result};
pub use tensor::{Scalar, Tensor};
