//! Orthonormal DCT-II and its inverse.
//!
//! [`DctBasis`] holds the explicit basis `D[i, k] = α_k cos(π(2i+1)k / 2N)`
//! (row `i` = sample, column `k` = frequency), so a 1D transform is
//! `x̂ = Dᵀx` and the inverse is `x = D x̂`. The 2D transform of an `n × d`
//! matrix is `X̂ = D_nᵀ X D_d`.
//!
//! [`dct2`] / [`idct2`] evaluate the same transform separably, one FFT of
//! length N per row or column (Makhoul's reordering), which is what gives
//! DCT graying its `O(nd log nd)` cost. [`dct2_dense`] / [`idct2_dense`] are
//! the literal basis products and serve as the reference route.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::linalg::{matmul, matmul_tn, Matrix};

#[derive(Clone, Debug)]
pub struct DctBasis {
    n: usize,
    d: Matrix,
    alpha: Vec<f64>,
}

impl DctBasis {
    pub fn size(&self) -> usize {
        self.n
    }

    /// `N × N`, indexed `[sample, frequency]`.
    pub fn matrix(&self) -> &Matrix {
        &self.d
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `x̂ = Dᵀx` for a length-N signal.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "signal length must match basis size");
        (0..self.n)
            .map(|k| (0..self.n).map(|i| self.d.get(i, k) * x[i]).sum())
            .collect()
    }

    /// `x = D x̂`.
    pub fn inverse(&self, xhat: &[f64]) -> Vec<f64> {
        assert_eq!(xhat.len(), self.n, "coefficient length must match basis size");
        (0..self.n)
            .map(|i| (0..self.n).map(|k| self.d.get(i, k) * xhat[k]).sum())
            .collect()
    }
}

pub fn dct_alpha(n: usize, k: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// # Panics
/// If `n == 0`.
pub fn build_dct_basis(n: usize) -> DctBasis {
    assert!(n >= 1, "DCT basis size must be positive");
    let alpha: Vec<f64> = (0..n).map(|k| dct_alpha(n, k)).collect();
    let nf = n as f64;
    let d = Matrix::from_fn(n, n, |i, k| {
        alpha[k] * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    });
    DctBasis { n, d, alpha }
}

/// `D_nᵀ X D_d` by explicit basis products.
pub fn dct2_dense(x: &Matrix) -> Matrix {
    let dn = build_dct_basis(x.rows());
    let dd = build_dct_basis(x.cols());
    let left = matmul_tn(dn.matrix(), x).expect("basis matches rows");
    matmul(&left, dd.matrix()).expect("basis matches cols")
}

/// `D_n X̂ D_dᵀ` by explicit basis products.
pub fn idct2_dense(xhat: &Matrix) -> Matrix {
    let dn = build_dct_basis(xhat.rows());
    let dd = build_dct_basis(xhat.cols());
    let left = matmul(dn.matrix(), xhat).expect("basis matches rows");
    crate::linalg::matmul_nt(&left, dd.matrix()).expect("basis matches cols")
}

/// 1D orthonormal DCT-II / DCT-III of a fixed length through a length-N complex FFT.
struct Dct1d {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    // e^{-iπk/2N}, k = 0..N
    twiddle: Vec<Complex64>,
    alpha: Vec<f64>,
    scratch: Vec<Complex64>,
}

impl Dct1d {
    fn new(planner: &mut FftPlanner<f64>, n: usize) -> Self {
        let twiddle = (0..n)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / (2.0 * n as f64)))
            .collect();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            twiddle,
            alpha: (0..n).map(|k| dct_alpha(n, k)).collect(),
            scratch: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    fn forward(&mut self, x: &mut [f64]) {
        let n = self.n;
        let half = n.div_ceil(2);
        for k in 0..half {
            self.scratch[k] = Complex64::new(x[2 * k], 0.0);
        }
        for k in 0..n / 2 {
            self.scratch[n - 1 - k] = Complex64::new(x[2 * k + 1], 0.0);
        }
        self.fwd.process(&mut self.scratch);
        for k in 0..n {
            x[k] = self.alpha[k] * (self.scratch[k] * self.twiddle[k]).re;
        }
    }

    fn inverse(&mut self, xhat: &mut [f64]) {
        let n = self.n;
        // Unnormalized cosine sums y_k = x̂_k / α_k; V_k = e^{iπk/2N}(y_k − i·y_{N−k}).
        for k in 0..n {
            let yk = xhat[k] / self.alpha[k];
            let ynk = if k == 0 { 0.0 } else { xhat[n - k] / self.alpha[n - k] };
            self.scratch[k] = self.twiddle[k].conj() * Complex64::new(yk, -ynk);
        }
        self.inv.process(&mut self.scratch);
        let scale = 1.0 / n as f64;
        let half = n.div_ceil(2);
        for k in 0..half {
            xhat[2 * k] = self.scratch[k].re * scale;
        }
        for k in 0..n / 2 {
            xhat[2 * k + 1] = self.scratch[n - 1 - k].re * scale;
        }
    }
}

fn separable(x: &Matrix, inverse: bool) -> Matrix {
    let (n, d) = x.shape();
    let mut planner = FftPlanner::new();
    let mut col_t = Dct1d::new(&mut planner, n);
    let mut row_t = Dct1d::new(&mut planner, d);
    let mut out = x.clone();
    let mut buf = vec![0.0; n];
    for j in 0..d {
        for i in 0..n {
            buf[i] = out.get(i, j);
        }
        if inverse {
            col_t.inverse(&mut buf);
        } else {
            col_t.forward(&mut buf);
        }
        for i in 0..n {
            out.set(i, j, buf[i]);
        }
    }
    for i in 0..n {
        let row = out.row_mut(i);
        if inverse {
            row_t.inverse(row);
        } else {
            row_t.forward(row);
        }
    }
    out
}

/// 2D orthonormal DCT-II, `X̂ = D_nᵀ X D_d`.
pub fn dct2(x: &Matrix) -> Matrix {
    separable(x, false)
}

/// Inverse of [`dct2`], `X = D_n X̂ D_dᵀ`.
pub fn idct2(xhat: &Matrix) -> Matrix {
    separable(xhat, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul_nt, RngStream};

    #[test]
    fn size_one_basis() {
        let b = build_dct_basis(1);
        assert_eq!(b.matrix().as_slice(), &[1.0]);
        assert_eq!(b.alpha(), &[1.0]);
    }

    #[test]
    fn size_four_is_orthogonal() {
        let b = build_dct_basis(4);
        let g = matmul_tn(b.matrix(), b.matrix()).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-14);
        let g = matmul_nt(b.matrix(), b.matrix()).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-14);
    }

    #[test]
    fn entry_matches_closed_form() {
        let b = build_dct_basis(8);
        let expected = 0.5 * (15.0 * PI / 16.0).cos();
        assert!((b.matrix().get(2, 3) - expected).abs() < 1e-16);
        assert_eq!(b.alpha()[0], (1.0f64 / 8.0).sqrt());
        assert_eq!(b.alpha()[3], 0.5);
    }

    #[test]
    fn constant_signal_1d() {
        let xhat = build_dct_basis(4).forward(&[1.0; 4]);
        assert!((xhat[0] - 2.0).abs() < 1e-15);
        assert!(xhat[1..].iter().all(|v| v.abs() < 1e-15));
        let mut fast = vec![1.0; 4];
        Dct1d::new(&mut FftPlanner::new(), 4).forward(&mut fast);
        assert!((fast[0] - 2.0).abs() < 1e-15);
        assert!(fast[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn fast_matches_dense_for_odd_and_even_sizes() {
        for &(n, d) in &[(1, 1), (1, 5), (3, 2), (7, 12), (16, 9), (14, 14)] {
            let x = RngStream::new(9, (n * 100 + d) as u64).gaussian(n, d);
            let fast = dct2(&x);
            let dense = dct2_dense(&x);
            assert!(fast.max_abs_diff(&dense).unwrap() < 1e-12, "{n}x{d}");
            let back = idct2(&fast);
            assert!(back.max_abs_diff(&x).unwrap() < 1e-12, "{n}x{d}");
            assert!(idct2_dense(&dense).max_abs_diff(&x).unwrap() < 1e-12);
        }
    }

    #[test]
    fn constant_matrix_has_single_coefficient() {
        let c = 1.7;
        let (n, d) = (6, 10);
        let xhat = dct2(&Matrix::filled(n, d, c));
        assert!((xhat.get(0, 0) - c * ((n * d) as f64).sqrt()).abs() < 1e-12);
        let mut rest = xhat.clone();
        rest.set(0, 0, 0.0);
        assert!(rest.max_abs() < 1e-12);
    }

    #[test]
    fn one_hot_dc_inverts_to_ones() {
        let (n, d) = (5, 8);
        let mut xhat = Matrix::zeros(n, d);
        xhat.set(0, 0, ((n * d) as f64).sqrt());
        let x = idct2(&xhat);
        assert!(x.max_abs_diff(&Matrix::filled(n, d, 1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn zeros_map_to_zeros() {
        assert_eq!(dct2(&Matrix::zeros(3, 4)).max_abs(), 0.0);
        assert_eq!(idct2(&Matrix::zeros(3, 4)).max_abs(), 0.0);
    }
}
