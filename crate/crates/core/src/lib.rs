//! Contrastive + contextual image-text alignment on toy dual encoders.
//!
//! The numeric core (tape autodiff, losses, encoders, trainer, evaluators)
//! is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! precision for callers that do not care.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ModelParams64 = encoders::ModelParams<f64>;
pub type LossConfig64 = losses::LossConfig<f64>;
pub type TrainConfig64 = trainer::TrainConfig<f64>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ModelParams32 = encoders::ModelParams<f32>;
pub type LossConfig32 = losses::LossConfig<f32>;
pub type TrainConfig32 = trainer::TrainConfig<f32>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
