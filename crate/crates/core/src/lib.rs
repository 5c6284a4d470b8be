//! Coarse-to-fine controllable diffusion for blendshape facial-motion sequences.

pub mod conditioning;
pub mod coretypes;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod profile;
pub mod scalar;
pub mod seeds;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use profile::Profile;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Generator64 = denoiser::Generator<f64>;
pub type Generator32 = denoiser::Generator<f32>;
pub type Motion64 = coretypes::MotionSequence<f64>;
pub type Motion32 = coretypes::MotionSequence<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
