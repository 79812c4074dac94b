pub mod counts;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod ipf;
pub mod model;
pub mod popsize;
pub mod scalar;
pub mod sim;
pub mod structure;

pub use counts::CaptureCounts;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = model::ParameterSet<f64>;
pub type ParamsF32 = model::ParameterSet<f32>;
pub type Fit = fit::FitResult<f64>;
pub type FitF32 = fit::FitResult<f32>;
pub type Estimate = popsize::PopEstimate<f64>;
