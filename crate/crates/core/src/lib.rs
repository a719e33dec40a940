//! Region-channel calibrated encoder-decoder segmentation on a small f64
//! reverse-mode autodiff engine.

pub mod ablation;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod ops;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Stage, Variant};
pub use params::ParamStore;
pub use tensor::Tensor4;
