//! Synthetic VQA bias benchmark with a tape-based autodiff engine and the
//! RUBi question-only learning strategy.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod report;
pub mod sampler;
pub mod strategy;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Grads, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
