use serde::{Deserialize, Serialize};

use crate::linalg::{conditioning, LinalgError, Matrix};
use crate::vitcore::{tokens_forward_with_taps, LayerTaps, ModelParams, NORM_EPS};

use super::DiagError;

/// Where embeddings are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// As produced by the block.
    Raw,
    /// After per-token standardization (zero mean, unit variance per row),
    /// which removes token-scale effects from κ.
    Normalized,
}

/// Batch-mean `ln κ` of the embeddings around one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCondition {
    pub layer: usize,
    /// Self-attention output without the skip.
    pub sa_no_skip: f64,
    /// Self-attention output plus the block input.
    pub sa_skip: f64,
    pub mlp_no_skip: f64,
    pub mlp_skip: f64,
    /// Tokens entering the self-attention block.
    pub ln_kappa_in: f64,
    /// Tokens leaving it (whichever variant the layer passes on).
    pub ln_kappa_out: f64,
    /// Embeddings of this layer found numerically rank deficient; each was
    /// counted at the effectively-infinite ceiling.
    pub infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub tap: Tap,
    pub batch: usize,
    pub records: Vec<LayerCondition>,
}

impl ConditionReport {
    pub fn to_csv(&self) -> Result<String, DiagError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        super::finish_csv(w)
    }
}

/// `ln κ` clamped at the shape's effectively-infinite ceiling, and whether the
/// clamp was used because the matrix is rank deficient.
pub fn clamped_ln_kappa(m: &Matrix) -> Result<(f64, bool), LinalgError> {
    let c = conditioning(m)?;
    Ok((c.ln_kappa_clamped(m.rows(), m.cols()), !c.is_full_rank()))
}

fn standardize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let d = m.cols() as f64;
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Batch-mean clamped `ln κ` of the per-sample blocks of a stacked matrix,
/// plus the rank-deficient count.
fn batch_mean(stacked: &Matrix, batch: usize, tap: Tap) -> Result<(f64, usize), DiagError> {
    let n = stacked.rows() / batch;
    let mut sum = 0.0;
    let mut infinite = 0;
    for b in 0..batch {
        let block = stacked.row_block(b * n, n);
        let block = match tap {
            Tap::Raw => block,
            Tap::Normalized => standardize_rows(&block),
        };
        let (v, inf) = clamped_ln_kappa(&block)?;
        sum += v;
        infinite += usize::from(inf);
    }
    Ok((sum / batch as f64, infinite))
}

fn layer_record(layer: usize, t: &LayerTaps, batch: usize, tap: Tap) -> Result<LayerCondition, DiagError> {
    let mut infinite = 0;
    let mut m = |x: &Matrix| -> Result<f64, DiagError> {
        let (v, i) = batch_mean(x, batch, tap)?;
        infinite += i;
        Ok(v)
    };
    Ok(LayerCondition {
        layer,
        sa_no_skip: m(&t.sa)?,
        sa_skip: m(&t.sa_skip)?,
        mlp_no_skip: m(&t.mlp)?,
        mlp_skip: m(&t.mlp_skip)?,
        ln_kappa_in: m(&t.input)?,
        ln_kappa_out: m(&t.sab_out)?,
        infinite,
    })
}

/// Forward pass over `tokens` (patch matrices, already grayed if graying is
/// in use) capturing the four embeddings of every layer. Each per-layer
/// value is the mean over the batch of the per-sample `ln κ`.
pub fn layer_condition_profile(model: &ModelParams, tokens: &[Matrix], tap: Tap) -> Result<ConditionReport, DiagError> {
    if tokens.is_empty() {
        return Err(DiagError::Config("empty evaluation batch".into()));
    }
    let (_, taps) = tokens_forward_with_taps(tokens, model)?;
    let records = taps
        .iter()
        .enumerate()
        .map(|(l, t)| layer_record(l, t, tokens.len(), tap))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConditionReport {
        tap,
        batch: tokens.len(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;
    use crate::vitcore::{ImageShape, ModelSpec};

    fn model() -> ModelParams {
        let image = ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        };
        ModelParams::init(&ModelSpec::new(image, 4, 8, 2, 2, 3), RngStream::new(1, 0)).unwrap()
    }

    #[test]
    fn records_per_layer_and_non_negative() {
        let m = model();
        let tokens: Vec<_> = (0..3).map(|i| RngStream::new(2, i).gaussian(4, 16)).collect();
        for tap in [Tap::Raw, Tap::Normalized] {
            let r = layer_condition_profile(&m, &tokens, tap).unwrap();
            assert_eq!(r.records.len(), 2);
            for (l, rec) in r.records.iter().enumerate() {
                assert_eq!(rec.layer, l);
                for v in [rec.sa_no_skip, rec.sa_skip, rec.mlp_no_skip, rec.mlp_skip, rec.ln_kappa_in, rec.ln_kappa_out] {
                    assert!(v >= 0.0 && v.is_finite());
                }
            }
            assert_eq!(r.to_csv().unwrap().lines().count(), 3);
        }
    }

    #[test]
    fn rank_one_is_clamped() {
        let m = Matrix::filled(4, 3, 1.0);
        let (v, inf) = clamped_ln_kappa(&m).unwrap();
        assert!(inf);
        assert_eq!(v, crate::linalg::ln_kappa_ceiling(4, 3));
    }
}
