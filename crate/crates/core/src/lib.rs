//! Prediction under missingness shift: synthetic data, missingness
//! mechanisms, analytic predictors, imputation pipelines and
//! missingness-aware networks, plus the experiment harness tying them
//! together.
//!
//! Numerical building blocks are generic over [`Scalar`]; the model and
//! experiment layers use the `f64` aliases below.

pub mod analytic;
pub mod container;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod imputers;
pub mod missingness;
pub mod neural;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = diffcore::DenseMatrix<f64>;
pub type MatrixF32 = diffcore::DenseMatrix<f32>;
pub type Graph = diffcore::Tape<f64>;
pub type GraphF32 = diffcore::Tape<f32>;
