//! Treatment-response classification from paired PET/CT exams.
//!
//! Labels come from radiology report text (per-region SUVmax and a ±25%
//! change rule). The network encodes each exam with a 3D convolutional
//! backbone, pools the encoding with soft attention, subtracts the two
//! pooled vectors and classifies the difference as progression, resolution
//! or stable.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual choices.

pub mod error;
pub mod exam;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod saliency;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{OncoError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type OncoNet32 = model::OncoNet<f32>;
pub type OncoNet64 = model::OncoNet<f64>;
pub type ModelInput32 = exam::ModelInput<f32>;
pub type ModelInput64 = exam::ModelInput<f64>;
