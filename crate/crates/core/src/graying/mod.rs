//! Token graying: preprocessing that lifts the small singular values (or the
//! small DCT coefficients) of a token matrix to lower its condition number.
//!
//! Both transforms act on the per-image token matrix before patch embedding
//! and are never differentiated through.

mod dct;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{rank_tolerance, svd, LinalgError, Matrix};

pub use dct::{build_dct_basis, dct2, dct2_dense, dct_alpha, idct2, idct2_dense, DctBasis};

/// Amplification coefficient used unless a run says otherwise.
pub const DEFAULT_EPSILON: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrayingMethod {
    None,
    Svd,
    Dct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayingConfig {
    pub method: GrayingMethod,
    pub epsilon: f64,
    /// SVD graying only: multiply the result by the original `σ_max` so the
    /// largest singular value is kept instead of normalized to 1.
    #[serde(default)]
    pub rescale: bool,
}

impl Default for GrayingConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl GrayingConfig {
    pub fn none() -> Self {
        Self {
            method: GrayingMethod::None,
            epsilon: 1.0,
            rescale: false,
        }
    }

    pub fn svd(epsilon: f64) -> Self {
        Self {
            method: GrayingMethod::Svd,
            epsilon,
            rescale: false,
        }
    }

    pub fn dct(epsilon: f64) -> Self {
        Self {
            method: GrayingMethod::Dct,
            epsilon,
            rescale: false,
        }
    }

    pub fn validate(&self) -> Result<(), GrayingError> {
        check_epsilon(self.epsilon)
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix, GrayingError> {
        match self.method {
            GrayingMethod::None => Ok(x.clone()),
            GrayingMethod::Svd if self.rescale => svd_token_gray_rescaled(x, self.epsilon),
            GrayingMethod::Svd => svd_token_gray(x, self.epsilon),
            GrayingMethod::Dct => dct_token_gray(x, self.epsilon),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrayingError {
    #[error("amplification coefficient must lie in (0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("sample {index}: shape {}x{} differs from sample 0 shape {}x{}", found.0, found.1, expected.0, expected.1)]
    MixedShapes {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<GrayingError>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn check_epsilon(epsilon: f64) -> Result<(), GrayingError> {
    if epsilon > 0.0 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(GrayingError::InvalidEpsilon(epsilon))
    }
}

/// SVD token graying: `X̃ = U (Σ / σ_max)^ε Vᵀ`.
///
/// The output's largest singular value is 1 and `κ(X̃) = κ(X)^ε`. Singular
/// values below the numerical-rank tolerance are treated as zero and stay
/// zero; that case is logged, not rejected.
pub fn svd_token_gray(x: &Matrix, epsilon: f64) -> Result<Matrix, GrayingError> {
    Ok(svd_gray_impl(x, epsilon)?.0)
}

/// [`svd_token_gray`] followed by multiplication with the original `σ_max`,
/// which keeps the dominant singular value unchanged.
pub fn svd_token_gray_rescaled(x: &Matrix, epsilon: f64) -> Result<Matrix, GrayingError> {
    let (out, sigma_max) = svd_gray_impl(x, epsilon)?;
    Ok(out.scale(sigma_max))
}

fn svd_gray_impl(x: &Matrix, epsilon: f64) -> Result<(Matrix, f64), GrayingError> {
    check_epsilon(epsilon)?;
    let f = svd(x)?;
    let sigma_max = f.sigma_max();
    if sigma_max == 0.0 {
        log::warn!("svd graying: zero matrix left unchanged");
        return Ok((x.clone(), 0.0));
    }
    let tol = rank_tolerance(sigma_max, x.rows(), x.cols());
    let mut deficient = 0;
    let amplified: Vec<f64> = f
        .sigma
        .iter()
        .map(|&s| {
            if s <= tol {
                deficient += 1;
                0.0
            } else {
                (s / sigma_max).powf(epsilon)
            }
        })
        .collect();
    if deficient > 0 {
        log::warn!(
            "svd graying: {deficient} singular value(s) below rank tolerance {tol:e} kept at zero"
        );
    }
    Ok((f.reconstruct_with(&amplified), sigma_max))
}

/// DCT token graying.
///
/// With `X̂ = dct2(X)` and `m = max|X̂|`, every coefficient becomes
/// `(|X̂|/m)^ε · sign(X̂) · m` and the result is transformed back. The largest
/// coefficient magnitude and every sign are preserved. Coefficients at or
/// below `max(n, d)·ε_mach·m` are rounding residue of exact zeros and are
/// set to zero rather than amplified. All-zero input is returned unchanged.
pub fn dct_token_gray(x: &Matrix, epsilon: f64) -> Result<Matrix, GrayingError> {
    check_epsilon(epsilon)?;
    x.ensure_finite("dct_token_gray")?;
    let mut xhat = dct2(x);
    let m = xhat.max_abs();
    if m == 0.0 {
        return Ok(x.clone());
    }
    if epsilon == 1.0 {
        return Ok(idct2(&xhat));
    }
    let floor = rank_tolerance(m, x.rows(), x.cols());
    for v in xhat.as_mut_slice() {
        *v = if v.abs() <= floor {
            0.0
        } else {
            (v.abs() / m).powf(epsilon) * sign(*v) * m
        };
    }
    Ok(idct2(&xhat))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies `config` to every sample independently, in input order. All
/// samples must share the first sample's shape.
pub fn gray_batch(batch: &[Matrix], config: &GrayingConfig) -> Result<Vec<Matrix>, GrayingError> {
    if config.method != GrayingMethod::None {
        config.validate()?;
    }
    let Some(first) = batch.first() else {
        return Ok(Vec::new());
    };
    let expected = first.shape();
    if let Some((index, m)) = batch.iter().enumerate().find(|(_, m)| m.shape() != expected) {
        return Err(GrayingError::MixedShapes {
            index,
            expected,
            found: m.shape(),
        });
    }
    batch
        .iter()
        .enumerate()
        .map(|(index, x)| {
            config.apply(x).map_err(|e| GrayingError::Sample {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{condition_number, RngStream};

    #[test]
    fn epsilon_one_normalizes_by_sigma_max() {
        let x = RngStream::new(1, 0).gaussian(6, 4);
        let smax = svd(&x).unwrap().sigma_max();
        let y = svd_token_gray(&x, 1.0).unwrap();
        assert!(y.max_abs_diff(&x.scale(1.0 / smax)).unwrap() < 1e-12);
        let r = svd_token_gray_rescaled(&x, 1.0).unwrap();
        assert!(r.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn diagonal_half_power() {
        let y = svd_token_gray(&Matrix::from_diag(&[4.0, 1.0]), 0.5).unwrap();
        assert!(y.max_abs_diff(&Matrix::from_diag(&[1.0, 0.5])).unwrap() < 1e-15);
        assert!((condition_number(&y).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_keeps_zero_directions() {
        let x = Matrix::from_fn(4, 3, |i, j| (i + 1) as f64 * (j + 1) as f64);
        let y = svd_token_gray(&x, 0.5).unwrap();
        let s = svd(&y).unwrap().sigma;
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1e-12 && s[2] < 1e-12);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let x = Matrix::identity(2);
        for e in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(svd_token_gray(&x, e).is_err());
            assert!(dct_token_gray(&x, e).is_err());
        }
    }

    #[test]
    fn dct_gray_identity_and_constant() {
        let x = RngStream::new(2, 0).gaussian(8, 6);
        assert!(dct_token_gray(&x, 1.0).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        let c = Matrix::filled(5, 7, -2.5);
        assert!(dct_token_gray(&c, 0.3).unwrap().max_abs_diff(&c).unwrap() < 1e-12);
        let z = Matrix::zeros(3, 3);
        assert_eq!(dct_token_gray(&z, 0.5).unwrap(), z);
    }

    #[test]
    fn batch_validation_and_independence() {
        let a = RngStream::new(3, 0).gaussian(4, 4);
        let b = RngStream::new(3, 1).gaussian(4, 4);
        let cfg = GrayingConfig::svd(0.95);
        let out = gray_batch(&[a.clone(), b.clone()], &cfg).unwrap();
        assert_eq!(out[0], svd_token_gray(&a, 0.95).unwrap());
        assert_eq!(out[1], svd_token_gray(&b, 0.95).unwrap());
        assert_eq!(gray_batch(&[a.clone()], &GrayingConfig::none()).unwrap()[0], a);
        let err = gray_batch(&[a, b, Matrix::zeros(3, 4)], &cfg).unwrap_err();
        assert!(matches!(err, GrayingError::MixedShapes { index: 2, .. }), "{err}");
    }
}
