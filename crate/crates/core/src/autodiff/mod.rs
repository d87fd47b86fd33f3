//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation with its forward value; `backward`
//! walks it in reverse and accumulates vector-Jacobian products. Gradient
//! checking and full Jacobian assembly live here too.

mod tape;

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

pub(crate) use tape::depthwise_forward;
pub use tape::{ConvGeometry, Gradients, Tape, Var};

/// Largest Jacobian (`outputs × inputs` entries) [`jacobian`] will assemble.
pub const JACOBIAN_BUDGET: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("variable belongs to another tape or to a generation cleared by reset")]
    StaleVar,
    #[error("{op}: shape mismatch {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward needs a 1x1 output, got {}x{}", shape.0, shape.1)]
    NonScalar { shape: (usize, usize) },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Geometry(String),
    #[error("jacobian needs {required} entries, budget is {budget}")]
    BudgetExceeded { required: usize, budget: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        AutodiffError::Shape { op, left, right }
    }
}

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Matrix,
    pub numeric: Matrix,
    /// `max |a − b| / max(|a|, |b|, 1e-3)` over all entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Checks the gradient of a scalar-valued `f` at `x` with central differences
/// of step `step`. `f` receives a fresh tape and the leaf holding `x`.
pub fn grad_check<F>(f: F, x: &Matrix, step: f64) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.get(leaf)?;

    let eval = |m: Matrix| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let l = t.leaf(m);
        let o = f(&mut t, l)?;
        Ok(t.value(o)?.get(0, 0))
    };
    let mut numeric = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let plus = eval(probe.clone())?;
        probe.as_mut_slice()[k] = orig - step;
        let minus = eval(probe.clone())?;
        probe.as_mut_slice()[k] = orig;
        numeric.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
    }

    let mut max_rel_error: f64 = 0.0;
    let mut max_abs_error: f64 = 0.0;
    for (a, b) in analytic.as_slice().iter().zip(numeric.as_slice()) {
        let diff = (a - b).abs();
        max_abs_error = max_abs_error.max(diff);
        max_rel_error = max_rel_error.max(diff / a.abs().max(b.abs()).max(1e-3));
    }
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
    })
}

/// Full Jacobian of `f` at `x`, one reverse pass per output entry.
///
/// Row `i` is the gradient of output entry `i` (row-major) with respect to
/// the row-major entries of `x`.
pub fn jacobian<F>(f: F, x: &Matrix) -> Result<Matrix, AutodiffError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let (r, c) = tape.shape(out)?;
    let outputs = r * c;
    let required = outputs.saturating_mul(x.len());
    if required > JACOBIAN_BUDGET {
        return Err(AutodiffError::BudgetExceeded {
            required,
            budget: JACOBIAN_BUDGET,
        });
    }
    let mut jac = Matrix::zeros(outputs, x.len());
    for i in 0..outputs {
        let mut seed = Matrix::zeros(r, c);
        seed.as_mut_slice()[i] = 1.0;
        let g = tape.backward_from(out, seed)?.get(leaf)?;
        jac.row_mut(i).copy_from_slice(g.as_slice());
    }
    Ok(jac)
}

/// Jacobian of `f` by central differences; the slow reference route.
pub fn numeric_jacobian<F>(f: F, x: &Matrix, step: f64) -> Result<Matrix, AutodiffError>
where
    F: Fn(&Matrix) -> Result<Matrix, AutodiffError>,
{
    let base = f(x)?;
    let mut jac = Matrix::zeros(base.len(), x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[k] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        for i in 0..base.len() {
            jac.set(i, k, (plus.as_slice()[i] - minus.as_slice()[i]) / (2.0 * step));
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn check(name: &str, x: &Matrix, f: impl Fn(&mut Tape, Var) -> Result<Var, AutodiffError>) {
        let r = grad_check(f, x, STEP).unwrap();
        assert!(r.max_rel_error < TOL, "{name}: rel error {}", r.max_rel_error);
    }

    fn gauss(rows: usize, cols: usize, id: u64) -> Matrix {
        RngStream::new(77, id).gaussian(rows, cols)
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let x = gauss(3, 4, 0);
        let w = gauss(4, 2, 1);
        let b = gauss(1, 4, 2);
        let other = gauss(3, 4, 3);
        check("matmul", &x, |t, x| {
            let w = t.leaf(w.clone());
            let y = t.matmul(x, w)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check("matmul rhs", &w, |t, w| {
            let x = t.leaf(x.clone());
            let y = t.matmul(x, w)?;
            let y = t.powf(y, 2.0)?;
            t.sum(y)
        });
        check("add/sub/scale/transpose", &x, |t, x| {
            let o = t.leaf(other.clone());
            let a = t.add(x, o)?;
            let s = t.sub(a, x)?;
            let s = t.mul(s, x)?;
            let s = t.scale(s, 0.7)?;
            let s = t.transpose(s)?;
            let s = t.mul(s, s)?;
            t.sum(s)
        });
        check("add_row/mul_row", &b, |t, b| {
            let x = t.leaf(x.clone());
            let y = t.add_row(x, b)?;
            let y = t.mul_row(y, b)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check("gelu", &x, |t, x| {
            let y = t.gelu(x)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check("relu", &x, |t, x| {
            let y = t.relu(x)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check("powf", &x.map(|v| v.abs() + 0.5), |t, x| {
            let y = t.powf(x, 0.6)?;
            t.sum(y)
        });
    }

    #[test]
    fn normalizations_and_softmax() {
        let x = gauss(5, 6, 10);
        let probe = gauss(5, 6, 11);
        for which in 0..3 {
            check("norms", &x, |t, x| {
                let y = match which {
                    0 => t.row_softmax(x)?,
                    1 => t.layer_norm(x, 1e-5)?,
                    _ => t.batch_norm(x, 1e-5)?.0,
                };
                let p = t.leaf(probe.clone());
                let y = t.mul(y, p)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            });
        }
    }

    #[test]
    fn structural_ops() {
        let x = gauss(6, 4, 20);
        check("slices and concat", &x, |t, x| {
            let a = t.slice_cols(x, 1, 2)?;
            let b = t.slice_rows(x, 2, 3)?;
            let c = t.concat_cols(&[a, x])?;
            let d = t.concat_rows(&[b, x])?;
            let c = t.mul(c, c)?;
            let d = t.powf(d, 2.0)?;
            let s = t.sum(c)?;
            let e = t.sum(d)?;
            let f = t.segment_mean(x, 3)?;
            let f = t.mul(f, f)?;
            let f = t.sum(f)?;
            let s = t.add(s, e)?;
            t.add(s, f)
        });
    }

    #[test]
    fn losses() {
        let logits = gauss(4, 5, 30);
        check("cross_entropy", &logits, |t, l| t.cross_entropy(l, &[0, 4, 2, 2]));
        let target = gauss(4, 5, 31);
        check("mse", &logits, |t, l| {
            let y = t.leaf(target.clone());
            t.mse(l, y)
        });
    }

    #[test]
    fn depthwise_conv_gradients() {
        let geom = ConvGeometry {
            batch: 2,
            height: 4,
            width: 5,
            kernel: 3,
        };
        let x = gauss(40, 3, 40);
        let k = gauss(9, 3, 41);
        check("conv input", &x, |t, x| {
            let k = t.leaf(k.clone());
            let y = t.depthwise_conv(x, k, geom)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        check("conv kernel", &k, |t, k| {
            let x = t.leaf(x.clone());
            let y = t.depthwise_conv(x, k, geom)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
    }

    #[test]
    fn circular_padding_wraps() {
        // Kernel selecting the left neighbour (kx = 0, ky = 1) shifts every row right by one.
        let geom = ConvGeometry {
            batch: 1,
            height: 1,
            width: 4,
            kernel: 3,
        };
        let mut k = Matrix::zeros(9, 1);
        k.set(3, 0, 1.0);
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = depthwise_forward(&x, &k, geom);
        assert_eq!(y.as_slice(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn stale_vars_are_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::identity(2));
        t.reset();
        assert_eq!(t.scale(a, 2.0), Err(AutodiffError::StaleVar));
        let mut other = Tape::new();
        let b = other.leaf(Matrix::identity(2));
        let c = t.leaf(Matrix::identity(2));
        assert_eq!(t.add(c, b), Err(AutodiffError::StaleVar));
    }

    #[test]
    fn unused_leaf_gradient_is_zero_and_backward_needs_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(gauss(2, 2, 50));
        let unused = t.leaf(gauss(3, 1, 51));
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), Matrix::zeros(3, 1));
        assert_eq!(g.get(a).unwrap(), Matrix::filled(2, 2, 1.0));
        assert!(matches!(t.backward(a), Err(AutodiffError::NonScalar { .. })));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let mut m = Matrix::zeros(1, 3);
        m.set(0, 1, f64::NAN);
        let a = t.leaf(m);
        assert!(matches!(t.row_softmax(a), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn reverse_jacobian_matches_finite_differences() {
        let x = gauss(3, 3, 60);
        let w = gauss(3, 3, 61);
        let rev = jacobian(
            |t, x| {
                let w = t.leaf(w.clone());
                let y = t.matmul(x, w)?;
                t.row_softmax(y)
            },
            &x,
        )
        .unwrap();
        let fd = numeric_jacobian(
            |m| {
                let mut t = Tape::new();
                let x = t.leaf(m.clone());
                let w = t.leaf(w.clone());
                let y = t.matmul(x, w)?;
                let y = t.row_softmax(y)?;
                Ok(t.value(y)?.clone())
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(rev.max_abs_diff(&fd).unwrap() < 1e-8);
    }

    #[test]
    fn jacobian_budget() {
        let x = Matrix::zeros(4000, 1);
        let err = jacobian(|t, x| t.concat_rows(&[x]), &x).unwrap_err();
        assert!(matches!(err, AutodiffError::BudgetExceeded { .. }));
    }
}
