//! Measurements: randomized bound checks, per-layer embedding condition
//! profiles and self-attention Jacobian spectra.

mod bounds;
mod jacobian;
mod profile;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::linalg::LinalgError;
use crate::vitcore::VitError;

pub use bounds::{
    attention_core, attention_product, convmixer_trial, depthwise_matrix, ffn_trial,
    gaussian_extreme_fractions, prop1_trial, psd_polar_factor, skip_kappas, verify_convmixer_bound,
    verify_ffn_bound, verify_prop1, verify_prop2, BoundTrial, BoundTrialStats, CONV_BOUND_KERNEL,
};
pub use jacobian::{
    jacobian_skip_study, sab_jacobian_spectrum, sab_probe_model, spectrum_ln_kappa, JacobianRow,
};
pub use profile::{clamped_ln_kappa, layer_condition_profile, ConditionReport, LayerCondition, Tap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("{0}")]
    Config(String),
    #[error("{suite} trial {trial}: no full-rank draw in {attempts} attempts")]
    Degenerate {
        suite: String,
        trial: usize,
        attempts: usize,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] VitError),
}

impl From<csv::Error> for DiagError {
    fn from(e: csv::Error) -> Self {
        DiagError::Csv(e.to_string())
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, DiagError> {
    let bytes = w.into_inner().map_err(|e| DiagError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| DiagError::Csv(e.to_string()))
}

/// Median of finite values (mean of the middle pair for even counts); NaN
/// when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
