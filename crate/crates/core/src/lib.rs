//! Exponential power kernel machines for mask-based speech enhancement.

pub mod autotune;
pub mod dsp;
pub mod eigenpro;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod subband;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type KernelParams64 = kernel::KernelParams<f64>;
pub type KernelParams32 = kernel::KernelParams<f32>;
pub type KernelModel64 = eigenpro::KernelModel<f64>;
pub type KernelModel32 = eigenpro::KernelModel<f32>;
pub type SubbandModel64 = subband::SubbandModel<f64>;
pub type SubbandModel32 = subband::SubbandModel<f32>;
pub type FeatureMatrix64 = matrix::FeatureMatrix<f64>;
pub type FeatureMatrix32 = matrix::FeatureMatrix<f32>;
pub type MaskMatrix64 = matrix::MaskMatrix<f64>;
pub type MaskMatrix32 = matrix::MaskMatrix<f32>;
pub type TuneResult64 = autotune::TuneResult<f64>;
pub type TuneResult32 = autotune::TuneResult<f32>;
pub type SearchSpace64 = autotune::SearchSpace<f64>;
pub type SearchSpace32 = autotune::SearchSpace<f32>;
