//! Randomized checks of the conditioning inequalities for self-attention,
//! the skip connection, the linear FFN and the depthwise convolution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{depthwise_forward, ConvGeometry};
use crate::linalg::{
    conditioning, matmul, matmul_nt, matmul_tn, svd, Conditioning, Matrix, RngStream, Sampler,
};

use super::{median, DiagError};

/// Draws per trial before a persistently rank-deficient draw is an error.
const MAX_REDRAWS: usize = 64;

/// Kernel side used by the depthwise-convolution suite.
pub const CONV_BOUND_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// The data-independent constant multiplying the data term.
    pub c: f64,
    /// Extreme singular values of the data matrix `X`.
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub satisfied: bool,
    /// Suite-specific extra values; every trial of a suite has the same keys.
    pub aux: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrialStats {
    pub suite: String,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    /// Draws thrown away because a matrix that must be full rank was not.
    pub redrawn: usize,
    /// Trials evaluated but left out of the ratios (singular right-hand side).
    pub excluded: usize,
    pub records: Vec<BoundTrial>,
    pub fraction_satisfied: f64,
    pub median_ratio: f64,
    pub median_ln_ratio: f64,
    pub c_min: f64,
    pub c_median: f64,
    pub c_max: f64,
}

impl BoundTrialStats {
    fn collect(suite: &str, n: usize, d: usize, trials: usize, redrawn: usize, excluded: usize, records: Vec<BoundTrial>) -> Self {
        let m = records.len().max(1) as f64;
        let ratios: Vec<f64> = records.iter().map(|r| r.lhs / r.rhs).collect();
        let ln_ratios: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
        let mut cs: Vec<f64> = records.iter().map(|r| r.c).collect();
        cs.sort_by(f64::total_cmp);
        Self {
            suite: suite.into(),
            n,
            d,
            trials,
            redrawn,
            excluded,
            fraction_satisfied: records.iter().filter(|r| r.satisfied).count() as f64 / m,
            median_ratio: median(&ratios),
            median_ln_ratio: median(&ln_ratios),
            c_min: cs.first().copied().unwrap_or(f64::NAN),
            c_median: median(&cs),
            c_max: cs.last().copied().unwrap_or(f64::NAN),
            records,
        }
    }

    /// One CSV row per trial; auxiliary columns follow the fixed ones.
    pub fn to_csv(&self) -> Result<String, DiagError> {
        let aux: Vec<String> = self
            .records
            .first()
            .map(|r| r.aux.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["trial", "lhs", "rhs", "c", "sigma_max", "sigma_min", "satisfied"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(aux.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.trial.to_string(),
                r.lhs.to_string(),
                r.rhs.to_string(),
                r.c.to_string(),
                r.sigma_max.to_string(),
                r.sigma_min.to_string(),
                r.satisfied.to_string(),
            ];
            row.extend(aux.iter().map(|k| r.aux.get(k).map_or(String::new(), f64::to_string)));
            w.write_record(&row)?;
        }
        super::finish_csv(w)
    }
}

fn kappa_of(c: &Conditioning) -> Option<f64> {
    c.kappa()
}

fn cond(a: &Matrix) -> Result<Conditioning, DiagError> {
    Ok(conditioning(a)?)
}

/// κ of a matrix that is expected to be full rank; `None` otherwise.
fn kappa(a: &Matrix) -> Result<Option<f64>, DiagError> {
    Ok(kappa_of(&cond(a)?))
}

fn trial_stream(stream: &RngStream, trial: usize) -> Sampler {
    stream.substream(trial as u64).sampler()
}

/// Relative slack for rounding in the deterministic inequalities.
const ROUNDING_SLACK: f64 = 1e-9;

fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + ROUNDING_SLACK)
}

/// The linear attention product `X·W_Q·W_Kᵀ·Xᵀ·X·W_V`.
pub fn attention_product(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix, DiagError> {
    Ok(matmul(x, &attention_core(x, wq, wk, wv)?)?)
}

/// `W_Q·W_Kᵀ·Xᵀ·X·W_V` (`d × d`), so that the attention product is `X·M`.
pub fn attention_core(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix, DiagError> {
    let gram = matmul_tn(x, x)?;
    let qk = matmul_nt(wq, wk)?;
    Ok(matmul(&matmul(&qk, &gram)?, wv)?)
}

/// Self-attention bound on given matrices: `lhs = κ(X W_Q W_Kᵀ Xᵀ X W_V)`,
/// `rhs = κ(W_Q)κ(W_K)κ(W_V) · κ(X)³`. `None` when a factor is rank deficient.
pub fn prop1_trial(trial: usize, x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Option<BoundTrial>, DiagError> {
    let cx = cond(x)?;
    let (Some(kx), Some(kq), Some(kk), Some(kv)) = (kappa_of(&cx), kappa(wq)?, kappa(wk)?, kappa(wv)?) else {
        return Ok(None);
    };
    let Some(lhs) = kappa(&attention_product(x, wq, wk, wv)?)? else {
        return Ok(None);
    };
    let c = kq * kk * kv;
    let rhs = c * kx.powi(3);
    Ok(Some(BoundTrial {
        trial,
        lhs,
        rhs,
        c,
        sigma_max: cx.sigma_max,
        sigma_min: cx.sigma_min,
        satisfied: holds(lhs, rhs),
        aux: BTreeMap::from([("c_q".into(), kq), ("c_k".into(), kk), ("c_v".into(), kv)]),
    }))
}

fn check_dims(n: usize, d: usize) -> Result<(), DiagError> {
    if d == 0 || n < d {
        return Err(DiagError::Config(format!("need n >= d >= 1, got n={n}, d={d}")));
    }
    Ok(())
}

/// Runs `draw` until it yields a record or the redraw budget is spent.
fn redraw_loop<F>(suite: &str, trial: usize, redrawn: &mut usize, mut draw: F) -> Result<BoundTrial, DiagError>
where
    F: FnMut() -> Result<Option<BoundTrial>, DiagError>,
{
    for _ in 0..MAX_REDRAWS {
        if let Some(r) = draw()? {
            return Ok(r);
        }
        *redrawn += 1;
    }
    Err(DiagError::Degenerate {
        suite: suite.into(),
        trial,
        attempts: MAX_REDRAWS,
    })
}

/// Gaussian `X` (`n × d`) and weights (`d × d`), all i.i.d. standard normal.
pub fn verify_prop1(n: usize, d: usize, trials: usize, stream: &RngStream) -> Result<BoundTrialStats, DiagError> {
    check_dims(n, d)?;
    let mut redrawn = 0;
    let mut records = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut s = trial_stream(stream, t);
        records.push(redraw_loop("prop1", t, &mut redrawn, || {
            let x = s.gaussian(n, d);
            let (wq, wk, wv) = (s.gaussian(d, d), s.gaussian(d, d), s.gaussian(d, d));
            prop1_trial(t, &x, &wq, &wk, &wv)
        })?);
    }
    Ok(BoundTrialStats::collect("prop1", n, d, trials, redrawn, 0, records))
}

/// `κ(X·M + X)` and `κ(X·M)`, each `None` when rank deficient.
pub fn skip_kappas(x: &Matrix, m: &Matrix) -> Result<(Option<f64>, Option<f64>), DiagError> {
    let xm = matmul(x, m)?;
    let with_skip = xm.add(x)?;
    Ok((kappa(&with_skip)?, kappa(&xm)?))
}

/// PSD matrix with the singular values of `a`: `V·Σ·Vᵀ` from `a = UΣVᵀ`,
/// i.e. `BᵀB` for `B = Σ^{1/2}Vᵀ`.
pub fn psd_polar_factor(a: &Matrix) -> Result<Matrix, DiagError> {
    let f = svd(a)?;
    let mut vs = f.v.clone();
    for i in 0..vs.rows() {
        for (k, s) in f.sigma.iter().enumerate() {
            vs.set(i, k, vs.get(i, k) * s);
        }
    }
    Ok(matmul_nt(&vs, &f.v)?)
}

/// One skip-connection trial on given matrices. `c` and the appendix bounds
/// use the supplied weight constant.
fn prop2_record(trial: usize, x: &Matrix, m: &Matrix, c: f64) -> Result<Result<BoundTrial, bool>, DiagError> {
    let cx = cond(x)?;
    if !cx.is_full_rank() {
        return Ok(Err(false));
    }
    let (with_skip, without) = skip_kappas(x, m)?;
    let (Some(lhs), Some(rhs)) = (with_skip, without) else {
        // Singular X·M: reported as excluded, not redrawn.
        return Ok(Err(true));
    };
    let (smax, smin) = (cx.sigma_max, cx.sigma_min);
    let kx = smax / smin;
    let km = kappa(m)?.unwrap_or(f64::INFINITY);
    let kmi = kappa(&m.add(&Matrix::identity(m.rows()))?)?.unwrap_or(f64::INFINITY);
    Ok(Ok(BoundTrial {
        trial,
        lhs,
        rhs,
        c,
        sigma_max: smax,
        sigma_min: smin,
        satisfied: lhs < rhs,
        aux: BTreeMap::from([
            ("kappa_x".into(), kx),
            ("kappa_m".into(), km),
            ("kappa_m_plus_i".into(), kmi),
            ("bound_no_skip".into(), c * smax.powi(3) / smin.powi(3)),
            ("bound_skip".into(), (c * smax.powi(3) + smax) / (smin.powi(3) + smin)),
        ]),
    }))
}

/// Skip-connection comparison `κ(XM + X)` (lhs) vs `κ(XM)` (rhs).
///
/// With `psd_mode` the raw attention core `A = W_Q W_Kᵀ XᵀX W_V` is replaced
/// by its PSD polar factor (same singular values); otherwise `M = A`.
/// `c = κ(W_Q)κ(W_K)κ(W_V)` feeds the recorded appendix bound values.
pub fn verify_prop2(n: usize, d: usize, trials: usize, stream: &RngStream, psd_mode: bool) -> Result<BoundTrialStats, DiagError> {
    check_dims(n, d)?;
    let suite = if psd_mode { "prop2_psd" } else { "prop2_raw" };
    let mut redrawn = 0;
    let mut excluded = 0;
    let mut records = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut s = trial_stream(stream, t);
        let mut attempts = 0;
        loop {
            if attempts == MAX_REDRAWS {
                return Err(DiagError::Degenerate {
                    suite: suite.into(),
                    trial: t,
                    attempts,
                });
            }
            attempts += 1;
            let x = s.gaussian(n, d);
            let (wq, wk, wv) = (s.gaussian(d, d), s.gaussian(d, d), s.gaussian(d, d));
            let (Some(kq), Some(kk), Some(kv)) = (kappa(&wq)?, kappa(&wk)?, kappa(&wv)?) else {
                redrawn += 1;
                continue;
            };
            let a = attention_core(&x, &wq, &wk, &wv)?;
            let m = if psd_mode { psd_polar_factor(&a)? } else { a };
            match prop2_record(t, &x, &m, kq * kk * kv)? {
                Ok(r) => records.push(r),
                Err(true) => excluded += 1,
                Err(false) => {
                    redrawn += 1;
                    continue;
                }
            }
            break;
        }
    }
    Ok(BoundTrialStats::collect(suite, n, d, trials, redrawn, excluded, records))
}

/// Linear FFN bound on given matrices: `lhs = κ(X W_up W_down)`,
/// `rhs = κ(W_up)κ(W_down)κ(X)`. The product constant `κ(W_up W_down)` and
/// whether the bound holds with it are recorded alongside.
pub fn ffn_trial(trial: usize, x: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Option<BoundTrial>, DiagError> {
    let cx = cond(x)?;
    let (Some(kx), Some(ku), Some(kd)) = (kappa_of(&cx), kappa(w_up)?, kappa(w_down)?) else {
        return Ok(None);
    };
    let w = matmul(w_up, w_down)?;
    let (Some(kw), Some(lhs)) = (kappa(&w)?, kappa(&matmul(x, &w)?)?) else {
        return Ok(None);
    };
    let c = ku * kd;
    let rhs = c * kx;
    Ok(Some(BoundTrial {
        trial,
        lhs,
        rhs,
        c,
        sigma_max: cx.sigma_max,
        sigma_min: cx.sigma_min,
        satisfied: holds(lhs, rhs),
        aux: BTreeMap::from([
            ("c_up".into(), ku),
            ("c_down".into(), kd),
            ("c_product".into(), kw),
            ("product_bound_holds".into(), f64::from(u8::from(holds(lhs, kw * kx)))),
        ]),
    }))
}

/// Gaussian `X` (`n × d`), `W_up` (`d × 4d`), `W_down` (`4d × d`).
pub fn verify_ffn_bound(n: usize, d: usize, trials: usize, stream: &RngStream) -> Result<BoundTrialStats, DiagError> {
    check_dims(n, d)?;
    let mut redrawn = 0;
    let mut records = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut s = trial_stream(stream, t);
        records.push(redraw_loop("ffn", t, &mut redrawn, || {
            let x = s.gaussian(n, d);
            let (up, down) = (s.gaussian(d, 4 * d), s.gaussian(4 * d, d));
            ffn_trial(t, &x, &up, &down)
        })?);
    }
    Ok(BoundTrialStats::collect("ffn", n, d, trials, redrawn, 0, records))
}

/// Unrolled matrix of a `k × k` depthwise kernel on a `size × size` grid with
/// circular padding: `(W·x)[p] = Σ kernel[ky,kx] · x[(y+ky−k/2, x+kx−k/2) mod size]`
/// where positions are raster ordered.
pub fn depthwise_matrix(kernel: &[f64], k: usize, size: usize) -> Result<Matrix, DiagError> {
    if k % 2 == 0 || kernel.len() != k * k || size == 0 {
        return Err(DiagError::Config(format!(
            "kernel needs odd side and k*k taps, got side {k} with {} taps on size {size}",
            kernel.len()
        )));
    }
    let s = size as isize;
    let half = (k / 2) as isize;
    let mut w = Matrix::zeros(size * size, size * size);
    for y in 0..s {
        for x in 0..s {
            let row = (y * s + x) as usize;
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    let sy = (y + ky - half).rem_euclid(s);
                    let sx = (x + kx - half).rem_euclid(s);
                    let col = (sy * s + sx) as usize;
                    let v = w.get(row, col) + kernel[(ky * k as isize + kx) as usize];
                    w.set(row, col, v);
                }
            }
        }
    }
    Ok(w)
}

/// Depthwise bound on a given kernel and `X` (`size² × h`, the kernel shared
/// by every channel so that the convolution is the product `W_CD·X`):
/// `lhs = κ(W_CD X)`, `rhs = κ(W_CD)κ(X)`.
pub fn convmixer_trial(trial: usize, kernel: &[f64], k: usize, size: usize, x: &Matrix) -> Result<Option<BoundTrial>, DiagError> {
    let w = depthwise_matrix(kernel, k, size)?;
    let cx = cond(x)?;
    let (Some(kx), Some(kw)) = (kappa_of(&cx), kappa(&w)?) else {
        return Ok(None);
    };
    // The tape's convolution and the unrolled matrix must agree.
    let h = x.cols();
    let tiled = Matrix::from_fn(k * k, h, |i, _| kernel[i]);
    let conv = depthwise_forward(
        x,
        &tiled,
        ConvGeometry {
            batch: 1,
            height: size,
            width: size,
            kernel: k,
        },
    );
    let wx = matmul(&w, x)?;
    let scale = wx.max_abs().max(1.0);
    if wx.max_abs_diff(&conv).is_none_or(|e| e > 1e-10 * scale) {
        return Err(DiagError::Config("unrolled depthwise matrix disagrees with the convolution".into()));
    }
    let Some(lhs) = kappa(&wx)? else {
        return Ok(None);
    };
    let rhs = kw * kx;
    Ok(Some(BoundTrial {
        trial,
        lhs,
        rhs,
        c: kw,
        sigma_max: cx.sigma_max,
        sigma_min: cx.sigma_min,
        satisfied: holds(lhs, rhs),
        aux: BTreeMap::from([("kappa_x".into(), kx)]),
    }))
}

/// Random Gaussian kernels and features on a `size × size` grid with
/// `channels` columns; `size² ≥ channels`.
pub fn verify_convmixer_bound(channels: usize, size: usize, trials: usize, stream: &RngStream) -> Result<BoundTrialStats, DiagError> {
    check_dims(size * size, channels)?;
    let k = CONV_BOUND_KERNEL;
    let mut redrawn = 0;
    let mut records = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut s = trial_stream(stream, t);
        records.push(redraw_loop("convmixer", t, &mut redrawn, || {
            let kernel = s.gaussian(1, k * k).into_vec();
            let x = s.gaussian(size * size, channels);
            convmixer_trial(t, &kernel, k, size, &x)
        })?);
    }
    Ok(BoundTrialStats::collect("convmixer", size * size, channels, trials, redrawn, 0, records))
}

/// Fractions of Gaussian `n × d` draws with `σ_max > 1` and with `σ_min < 1`.
pub fn gaussian_extreme_fractions(n: usize, d: usize, trials: usize, stream: &RngStream) -> Result<(f64, f64), DiagError> {
    let mut above = 0;
    let mut below = 0;
    for t in 0..trials {
        let c = cond(&trial_stream(stream, t).gaussian(n, d))?;
        above += usize::from(c.sigma_max > 1.0);
        below += usize::from(c.sigma_min < 1.0);
    }
    let m = trials.max(1) as f64;
    Ok((above as f64 / m, below as f64 / m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_x_gives_rhs_c() {
        // Columns of a permutation-like n×d matrix are orthonormal: κ(X) = 1.
        let x = Matrix::from_fn(6, 3, |i, j| f64::from(u8::from(i == 2 * j)));
        let s = RngStream::new(4, 0);
        let (wq, wk, wv) = (s.substream(1).gaussian(3, 3), s.substream(2).gaussian(3, 3), s.substream(3).gaussian(3, 3));
        let r = prop1_trial(0, &x, &wq, &wk, &wv).unwrap().unwrap();
        assert!((r.rhs - r.c).abs() <= 1e-9 * r.c);
        assert!(r.satisfied);
    }

    #[test]
    fn single_column_is_trivial() {
        let stats = verify_prop1(5, 1, 20, &RngStream::new(1, 0)).unwrap();
        for r in &stats.records {
            assert!((r.lhs - 1.0).abs() < 1e-12 && r.c == 1.0);
        }
        assert_eq!(stats.fraction_satisfied, 1.0);
    }

    #[test]
    fn zero_and_identity_m() {
        let x = RngStream::new(2, 0).gaussian(8, 4);
        let kx = crate::linalg::condition_number(&x).unwrap();
        let (skip, no_skip) = skip_kappas(&x, &Matrix::zeros(4, 4)).unwrap();
        assert!((skip.unwrap() - kx).abs() < 1e-9 * kx);
        assert!(no_skip.is_none());
        let (skip, no_skip) = skip_kappas(&x, &Matrix::identity(4)).unwrap();
        assert!((skip.unwrap() - no_skip.unwrap()).abs() < 1e-9 * kx);
    }

    #[test]
    fn polar_factor_is_symmetric_with_same_spectrum() {
        let a = RngStream::new(3, 0).gaussian(5, 5);
        let m = psd_polar_factor(&a).unwrap();
        assert!(m.max_abs_diff(&m.transpose()).unwrap() < 1e-12);
        let sa = crate::linalg::singular_values(&a).unwrap();
        let sm = crate::linalg::singular_values(&m).unwrap();
        for (p, q) in sa.iter().zip(&sm) {
            assert!((p - q).abs() < 1e-10 * sa[0]);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        assert_eq!(depthwise_matrix(&kernel, 3, 5).unwrap(), Matrix::identity(25));
        let x = RngStream::new(5, 0).gaussian(25, 4);
        let r = convmixer_trial(0, &kernel, 3, 5, &x).unwrap().unwrap();
        assert!((r.c - 1.0).abs() < 1e-12);
        assert!((r.lhs - r.rhs).abs() < 1e-9 * r.rhs);
    }

    #[test]
    fn suites_are_seed_deterministic() {
        let a = verify_ffn_bound(8, 4, 5, &RngStream::new(9, 0)).unwrap();
        let b = verify_ffn_bound(8, 4, 5, &RngStream::new(9, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.to_csv().unwrap().lines().count() == 6);
    }
}
