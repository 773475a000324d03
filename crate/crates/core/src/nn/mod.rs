//! Minimal reverse-mode neural network engine used by every trainable model.

pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{Activation, Conv3d, ConvTranspose3d, GroupNorm, Linear};
pub use optim::{AdamW, OptimizerSettings};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{CrossEntropyMode, Grads, Tape, Var};
