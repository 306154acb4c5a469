//! Dense linear algebra, a matrix-valued reverse-mode tape, the real
//! non-symmetric eigensolver and Adam.

pub mod adam;
pub mod decomp;
pub mod eigen;
pub mod matrix;
pub mod tape;

use num_complex::Complex64;
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use decomp::{Cholesky, Lu};
pub use eigen::{eigen_grad, eigenvalues, eigenvectors, stability_hinge, EigenPair, Spectrum};
pub use matrix::{dot, Matrix};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    DimensionMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("expected {rows}x{cols} = {} entries, got {len}", rows * cols)]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix must be square, got {}x{}", shape.0, shape.1)]
    NotSquare { shape: (usize, usize) },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("QR iteration did not converge for eigenvalue {index}; {} found", partial.len())]
    NoConvergence { index: usize, partial: Vec<Complex64> },
    #[error("eigenvalue {index} is not simple (separation {separation:e})")]
    NearDefective { index: usize, separation: f64 },
    #[error("backward pass needs a 1x1 loss, got {}x{}", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
}
