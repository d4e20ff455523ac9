//! PartialNet: convolutional networks built from partial attention
//! convolutions, with a learnable channel split, structural reparameterization
//! for inference and a small training harness.

pub mod blocks;
pub mod checkpoint;
pub mod complexity;
pub mod dpconv;
pub mod error;
pub mod fusion;
pub mod kv;
pub mod layers;
pub mod model;
pub mod params;
pub mod split;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use pn_tensor::{DType, Element};
