//! Tensor engine, spectral kernels and network for the UHDRes restorer.

pub mod autograd;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
mod fft;
pub mod error;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use config::{BnInference, RunConfig, TrainConfig, UHDResConfig};
pub use error::{Error, Result};
pub use model::UHDResModel;
pub use params::ParamStore;
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::{Init, Tensor};

/// Default element type: `f32`, or `f64` with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = UHDResModel<f32>;
pub type Model64 = UHDResModel<f64>;
