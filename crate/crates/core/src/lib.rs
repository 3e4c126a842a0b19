//! A small decoder-only transformer for GPS trajectories.
//!
//! Points `(lat, lon, t)` are normalized, split into calendar features and
//! delta-encoded; the model regresses the next `(Δlat, Δlon, Δt)` per position.
//! Everything on the differentiable path is generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix the precision.

// Var arithmetic is fallible, so it cannot implement the operator traits;
// `!(x > 0.0)` checks deliberately reject NaN.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod geo;
pub mod masking;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use config::{AttentionMode, ModelConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};
pub use train::{TrainConfig, Trainer};
pub use transformer::TrajectoryModel;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = TrajectoryModel<f64>;
pub type Model32 = TrajectoryModel<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
