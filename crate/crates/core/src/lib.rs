//! Dual-stage progressive enhancement network for single-image deraining.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`]: dense tensors and a small reverse-mode autodiff
//!   engine (eager and taped backends behind one trait).
//! * [`blocks`]: ResBlock, DDRB, PDRB, PAB and ERPAB.
//! * [`networks`]: the rain-streak removal stage, the detail reconstruction
//!   stage, their composition, initialization and checkpoints.
//! * [`losses`], [`metrics`]: training objectives and evaluation metrics.
//! * [`analysis`]: receptive-field, gridding, parameter and FLOP accounting.
//! * [`data`], [`training`]: paired datasets, synthetic rain and the
//!   optimization loop.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod analysis;
pub mod blocks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, DataError, Error, Result};
pub use scalar::{DType, Real};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type DpeNetParams32 = networks::DpeNetParams<f32>;
pub type DpeNetParams64 = networks::DpeNetParams<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
