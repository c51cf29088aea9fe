//! Multi-sampling-rate adaptive masked-prediction speech pre-training.
//!
//! Waveforms at 16, 22.05, 24 and 48 kHz are routed through rate-specific
//! strided convolution stacks that all land on a 20 ms frame grid, then share
//! one Transformer encoder and one k-means codebook for masked prediction.
//!
//! Numeric code is generic over [`Scalar`]; the `*32` aliases are what the
//! trainer uses, the `*64` aliases back gradient checks.

pub mod checkpoint;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod nn;
pub mod objective;
pub mod model;
pub mod plan;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::{Mat, Params, Tensor};

pub type Model32 = model::MsrModel<f32>;
pub type Model64 = model::MsrModel<f64>;
pub type Frontend32 = frontend::MultiRateFrontend<f32>;
pub type Frontend64 = frontend::MultiRateFrontend<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Head32 = objective::ProjectionHead<f32>;
pub type Head64 = objective::ProjectionHead<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
