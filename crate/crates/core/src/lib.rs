pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod morph;
pub mod scalar;
pub mod senses;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type CrfParams64 = crf::CrfParams<f64>;
pub type CrfParams32 = crf::CrfParams<f32>;
pub type Tagger64 = model::Tagger<f64>;
pub type Tagger32 = model::Tagger<f32>;
