//! Doubly robust estimation of conditional counterfactual mean embeddings and
//! the conditional counterfactual densities derived from them.

pub mod data;
pub mod density;
pub mod error;
pub mod estimators;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod nn;
pub mod propensity;
pub mod scalar;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases.
pub type Model = estimators::CcmeModel<f64>;
pub type Data = data::Dataset<f64>;
pub type Mat = linalg::Matrix<f64>;
pub type Curve = density::DensityCurve<f64>;

/// Single-precision aliases.
pub type ModelF32 = estimators::CcmeModel<f32>;
pub type DataF32 = data::Dataset<f32>;
pub type MatF32 = linalg::Matrix<f32>;
pub type CurveF32 = density::DensityCurve<f32>;
