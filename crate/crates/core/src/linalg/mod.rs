//! Dense linear algebra: the matrix type, Jacobi SVD, condition numbers,
//! seeded sampling and the matrix container format.

mod cond;
pub mod io;
mod matrix;
mod rng;
mod svd;

use thiserror::Error;

pub use cond::{
    condition_number, conditioning, ln_condition_number, ln_kappa_ceiling, rank_tolerance,
    Conditioning,
};
pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{random_gaussian, RngStream, Sampler};
pub use svd::{singular_values, svd, SvdFactors, ORTHOGONALITY_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("empty shape {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{rows}x{cols} matrix needs {} entries, got {len}", rows * cols)]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{op}: non-finite entry at ({row}, {col})")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },
    #[error("effectively infinite condition number: sigma_min {sigma_min:e} below rank tolerance {tolerance:e}")]
    RankDeficient { sigma_min: f64, tolerance: f64 },
    #[error("jacobi svd did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

impl LinalgError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        LinalgError::ShapeMismatch { op, left, right }
    }
}
