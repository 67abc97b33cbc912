//! Dense linear algebra, reverse-mode differentiation, Adam and batch
//! normalisation. Everything here is generic over [`Scalar`](crate::Scalar).

pub mod adam;
pub mod batchnorm;
pub mod linalg;
pub mod tape;

pub use adam::Adam;
pub use batchnorm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use linalg::{cholesky_solve, dot, Cholesky, DenseMatrix};
pub use tape::{forward_backward, BatchStats, Gradients, OpKind, Tape, Var};
