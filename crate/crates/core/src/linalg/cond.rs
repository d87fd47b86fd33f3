use serde::{Deserialize, Serialize};

use super::{singular_values, LinalgError, Matrix};

/// Extreme singular values of a matrix together with the numerical-rank
/// tolerance they were judged against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `σ_min` below this is treated as zero.
    pub tolerance: f64,
}

impl Conditioning {
    pub fn from_singular_values(sigma: &[f64], rows: usize, cols: usize) -> Self {
        let sigma_max = sigma.first().copied().unwrap_or(0.0);
        let sigma_min = sigma.last().copied().unwrap_or(0.0);
        Self {
            sigma_max,
            sigma_min,
            tolerance: rank_tolerance(sigma_max, rows, cols),
        }
    }

    pub fn is_full_rank(&self) -> bool {
        self.sigma_max > 0.0 && self.sigma_min > self.tolerance
    }

    /// `σ_max / σ_min`, or `None` when the matrix is numerically rank deficient.
    pub fn kappa(&self) -> Option<f64> {
        self.is_full_rank().then(|| self.sigma_max / self.sigma_min)
    }

    pub fn ln_kappa(&self) -> Option<f64> {
        self.kappa().map(f64::ln)
    }

    /// `ln κ`, clamped at [`ln_kappa_ceiling`] for rank-deficient input.
    pub fn ln_kappa_clamped(&self, rows: usize, cols: usize) -> f64 {
        self.ln_kappa()
            .map_or(ln_kappa_ceiling(rows, cols), |v| v.min(ln_kappa_ceiling(rows, cols)))
    }
}

/// `max(rows, cols) · ε · σ_max`.
pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// The largest `ln κ` a full-rank matrix of this shape can report under
/// [`rank_tolerance`]; used as the stand-in for "effectively infinite".
pub fn ln_kappa_ceiling(rows: usize, cols: usize) -> f64 {
    -(rows.max(cols) as f64 * f64::EPSILON).ln()
}

pub fn conditioning(a: &Matrix) -> Result<Conditioning, LinalgError> {
    let s = singular_values(a)?;
    Ok(Conditioning::from_singular_values(&s, a.rows(), a.cols()))
}

/// `κ(A) = σ_max / σ_min`; rank-deficient input is an error carrying the tolerance.
pub fn condition_number(a: &Matrix) -> Result<f64, LinalgError> {
    let c = conditioning(a)?;
    c.kappa().ok_or(LinalgError::RankDeficient {
        sigma_min: c.sigma_min,
        tolerance: c.tolerance,
    })
}

/// Natural log of [`condition_number`]. Plots of embedding conditioning use this form.
pub fn ln_condition_number(a: &Matrix) -> Result<f64, LinalgError> {
    condition_number(a).map(f64::ln)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(condition_number(&Matrix::identity(5)).unwrap(), 1.0);
        assert_eq!(condition_number(&Matrix::from_diag(&[4.0, 2.0, 1.0])).unwrap(), 4.0);
        assert_eq!(ln_condition_number(&Matrix::identity(3)).unwrap(), 0.0);
    }

    #[test]
    fn rank_deficient_reports_tolerance() {
        let a = Matrix::from_fn(4, 3, |i, _| i as f64 + 1.0);
        match condition_number(&a) {
            Err(LinalgError::RankDeficient { tolerance, .. }) => assert!(tolerance > 0.0),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        let c = conditioning(&a).unwrap();
        assert_eq!(c.ln_kappa_clamped(4, 3), ln_kappa_ceiling(4, 3));
    }

    #[test]
    fn zero_matrix_is_rank_deficient() {
        assert!(condition_number(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn scale_invariance() {
        let a = RngStream::new(5, 1).gaussian(6, 4);
        let k = condition_number(&a).unwrap();
        for c in [-3.0, 1e-3, 250.0] {
            let kc = condition_number(&a.scale(c)).unwrap();
            assert!((kc - k).abs() <= 1e-10 * k, "{c}: {kc} vs {k}");
        }
    }
}
