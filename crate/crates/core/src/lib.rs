//! Causal speech enhancement with simultaneous time-domain and
//! time-frequency-domain modeling, built on a small reverse-mode
//! differentiation engine.

pub mod autograd;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use model::{ForkNet, ForkNetConfig};
pub use scalar::Scalar;
pub use spectral::{AudioBuffer, ComplexSpectrogram, StftConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AudioBuffer32 = AudioBuffer<f32>;
pub type AudioBuffer64 = AudioBuffer<f64>;
pub type Spectrogram32 = ComplexSpectrogram<f32>;
pub type Spectrogram64 = ComplexSpectrogram<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ForkNet32 = ForkNet<f32>;
pub type ForkNet64 = ForkNet<f64>;
