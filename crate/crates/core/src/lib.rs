pub mod adversarial;
pub mod alignment;
pub mod autodiff;
pub mod detector;
pub mod domain;
pub mod error;
pub mod scalar;
pub mod synthetic;
pub mod train;
pub mod verify;

pub use domain::Domain;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type Model = train::Model<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type Model32 = train::Model<f32>;
