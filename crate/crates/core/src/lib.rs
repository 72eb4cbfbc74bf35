pub mod autodiff;
pub mod captioning;
pub mod causal;
pub mod confounder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod proposal;
pub mod tensor;
pub mod videoqa;

pub use error::{Error, Result};
pub use tensor::Tensor;
