pub mod autoencoder;
pub mod controlnet;
pub mod diffusion;
pub mod duo;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod segmentation;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
