//! Lightweight bitemporal change detection.

pub mod accounting;
pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod decoder;
pub mod edm;
pub mod encoder;
pub mod error;
pub mod fsutil;
pub mod imageio;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
mod parallel;
pub mod regions;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{FlopTally, Gradients, Tape, Var};
pub use config::{DecoderConfig, EncoderConfig, ModelConfig, WindowSpec};
pub use decoder::ChangeMap;
pub use error::{Error, Result, WeightFileError};
pub use model::Model;
pub use tensor::{Scalar, Tensor};
pub use weights::{load_weights, save_weights, WeightStore};
