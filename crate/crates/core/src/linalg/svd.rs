//! One-sided (Hestenes) Jacobi SVD.
//!
//! Column pairs of a working copy are rotated until every pair is orthogonal
//! to within [`ORTHOGONALITY_TOL`] relative to the pair's norms. The column
//! norms are then the singular values, the normalized columns are `U`, and the
//! accumulated rotations are `V`. Relative accuracy of small singular values is
//! what makes this the right choice for condition numbers.

use super::{LinalgError, Matrix};

/// A pair is considered orthogonal once `|aᵢ·aⱼ| ≤ tol·‖aᵢ‖‖aⱼ‖`.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U·diag(sigma)·Vᵀ` with `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix,
    /// Non-negative, descending.
    pub sigma: Vec<f64>,
    /// `cols × r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn sigma_max(&self) -> f64 {
        self.sigma[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.sigma.last().expect("sigma is never empty")
    }

    /// `U · diag(values) · Vᵀ`.
    pub fn reconstruct_with(&self, values: &[f64]) -> Matrix {
        let (n, r) = self.u.shape();
        let d = self.v.rows();
        let mut us = self.u.clone();
        for i in 0..n {
            for (k, s) in values.iter().enumerate().take(r) {
                let v = us.get(i, k) * s;
                us.set(i, k, v);
            }
        }
        let out = super::matmul_nt(&us, &self.v).expect("factor shapes agree by construction");
        debug_assert_eq!(out.shape(), (n, d));
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.sigma)
    }
}

pub fn svd(a: &Matrix) -> Result<SvdFactors, LinalgError> {
    a.ensure_finite("svd")?;
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

pub fn singular_values(a: &Matrix) -> Result<Vec<f64>, LinalgError> {
    Ok(svd(a)?.sigma)
}

// Works column-major internally: `cols[j]` is the j-th column of the working copy.
fn jacobi_tall(a: &Matrix) -> Result<SvdFactors, LinalgError> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro2: f64 = a.as_slice().iter().map(|x| x * x).sum();
    // Pairs whose norms are negligible against the whole matrix carry no
    // information; rotating them only chases rounding noise.
    let negligible = f64::MIN_POSITIVE.max(fro2 * f64::EPSILON * f64::EPSILON);

    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha * beta <= negligible * negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= ORTHOGONALITY_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let tiny = sig.get(order[0]).copied().unwrap_or(0.0) * f64::EPSILON * (m.max(n) as f64);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = sig[j];
        sigma.push(s);
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
        if s > tiny && s > 0.0 {
            for i in 0..m {
                u.set(i, k, cols[j][i] / s);
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(SvdFactors { u, sigma, v })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column (modified Gram-Schmidt over the standard basis).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, r) = u.shape();
    let mut filled: Vec<bool> = (0..r).map(|k| !missing.contains(&k)).collect();
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in (0..r).filter(|&j| filled[j]) {
                    let proj: f64 = (0..m).map(|i| u.get(i, j) * e[i]).sum();
                    for (i, ei) in e.iter_mut().enumerate() {
                        *ei -= proj * u.get(i, j);
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                for (i, ei) in e.iter().enumerate() {
                    u.set(i, k, ei / norm);
                }
                filled[k] = true;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul_tn, RngStream};

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = matmul_tn(q, q).unwrap();
        g.max_abs_diff(&Matrix::identity(q.cols())).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let f = svd(&Matrix::from_diag(&[4.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.sigma, vec![4.0, 2.0, 1.0]);
        assert!(f.u.max_abs_diff(&Matrix::identity(3)).unwrap() < 1e-15);
        assert!(f.v.max_abs_diff(&Matrix::identity(3)).unwrap() < 1e-15);
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let f = svd(&Matrix::from_diag(&[1.0, 5.0, 3.0])).unwrap();
        assert_eq!(f.sigma, vec![5.0, 3.0, 1.0]);
        assert!(f.reconstruct().max_abs_diff(&Matrix::from_diag(&[1.0, 5.0, 3.0])).unwrap() < 1e-15);
    }

    #[test]
    fn orthogonal_matrix_has_unit_spectrum() {
        let a = RngStream::new(3, 0).gaussian(6, 6);
        let q = svd(&a).unwrap().u;
        let f = svd(&q).unwrap();
        for s in f.sigma {
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        for &(r, c) in &[(7, 3), (3, 7), (5, 5), (1, 4), (4, 1)] {
            let a = RngStream::new(11, (r * 10 + c) as u64).gaussian(r, c);
            let f = svd(&a).unwrap();
            assert_eq!(f.sigma.len(), r.min(c));
            let rel = f.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-12, "{r}x{c}: {rel}");
            assert!(orthonormality_error(&f.u) < 1e-10);
            assert!(orthonormality_error(&f.v) < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_completes_u() {
        // Rank one: every column is a multiple of the first.
        let a = Matrix::from_fn(5, 3, |i, j| (i as f64 + 1.0) * (j as f64 + 1.0));
        let f = svd(&a).unwrap();
        assert!(f.sigma[1] < 1e-12 * f.sigma[0]);
        assert!(orthonormality_error(&f.u) < 1e-10);
        let rel = f.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let f = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&f.u) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a.set(0, 1, f64::INFINITY);
        assert!(matches!(svd(&a), Err(LinalgError::NonFinite { .. })));
    }
}
