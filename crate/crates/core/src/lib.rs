//! Numerical laboratory for the conditioning of self-attention embeddings.
//!
//! * [`linalg`]: matrices, Jacobi SVD, condition numbers, seeded sampling.
//! * [`graying`]: SVD and DCT token graying.
//! * [`autodiff`]: reverse-mode tape over matrices.
//! * [`vitcore`]: attention, FFN, ViT and ConvMixer forward semantics.
//! * [`diagnostics`]: bound-verification suites, layer condition profiles,
//!   block Jacobian spectra.
//! * [`harness`]: datasets, training loop, ablations, sweeps and reports.

pub mod autodiff;
pub mod diagnostics;
pub mod graying;
pub mod harness;
pub mod linalg;
pub mod vitcore;

pub use linalg::{Matrix, RngStream};
