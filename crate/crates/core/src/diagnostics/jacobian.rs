use serde::{Deserialize, Serialize};

use crate::autodiff::{jacobian, AutodiffError};
use crate::graying::GrayingConfig;
use crate::linalg::{singular_values, Matrix, RngStream};
use crate::vitcore::{sab_on_tape, BlockConfig, ImageShape, ModelParams, ModelSpec, VitError};

use super::DiagError;

/// Singular values (descending) of the Jacobian of one self-attention block
/// of `model` with respect to its `n × d` input tokens `x`. The block runs
/// exactly as configured in the layer, skip and pre-norm included.
pub fn sab_jacobian_spectrum(model: &ModelParams, layer: usize, x: &Matrix) -> Result<Vec<f64>, DiagError> {
    let params = model
        .layers
        .get(layer)
        .ok_or_else(|| DiagError::Config(format!("layer {layer} out of range (model has {})", model.layers.len())))?;
    let d = params.attn.dim();
    if x.cols() != d {
        return Err(DiagError::Config(format!("input has {} columns, block dim is {d}", x.cols())));
    }
    let mut inner: Option<VitError> = None;
    let jac = jacobian(
        |tape, xv| {
            let w = params.attn.bind(tape);
            let norm = (tape.leaf(params.norm1.gamma.clone()), tape.leaf(params.norm1.beta.clone()));
            match sab_on_tape(tape, xv, &w, params.attn.heads, params.attn.kind, params.config, Some(norm), 1) {
                Ok(nodes) => Ok(nodes.out),
                Err(VitError::Autodiff(e)) => Err(e),
                Err(e) => {
                    let msg = e.to_string();
                    inner = Some(e);
                    Err(AutodiffError::Geometry(msg))
                }
            }
        },
        x,
    );
    let jac = match (jac, inner) {
        (Ok(j), _) => j,
        (Err(_), Some(e)) => return Err(e.into()),
        (Err(e), None) => return Err(e.into()),
    };
    Ok(singular_values(&jac)?)
}

/// `ln(σ_max / σ_min)` of a spectrum; infinite when `σ_min` is zero.
pub fn spectrum_ln_kappa(spectrum: &[f64]) -> f64 {
    match (spectrum.first(), spectrum.last()) {
        (Some(&hi), Some(&lo)) => (hi / lo).ln(),
        _ => f64::NAN,
    }
}

/// A one-layer softmax model of width `d` used only for its first block.
pub fn sab_probe_model(d: usize, heads: usize, block: BlockConfig, stream: RngStream) -> Result<ModelParams, DiagError> {
    let image = ImageShape {
        height: 1,
        width: 1,
        channels: 1,
    };
    let mut spec = ModelSpec::new(image, 1, d, heads, 1, 2);
    spec.block = block;
    Ok(ModelParams::init(&spec, stream)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianRow {
    pub seed: u64,
    pub skip: bool,
    pub grayed: bool,
    pub ln_kappa: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

/// For each seed: a random-init block (no pre-norm) and Gaussian `n × d`
/// tokens, optionally grayed, evaluated with and without the skip. Seed `s`
/// draws the block from `stream.substream(2s)` and the tokens from
/// `stream.substream(2s + 1)`, so grayed and raw studies see the same draws.
pub fn jacobian_skip_study(
    n: usize,
    d: usize,
    heads: usize,
    seeds: u64,
    stream: &RngStream,
    graying: Option<&GrayingConfig>,
) -> Result<Vec<JacobianRow>, DiagError> {
    let mut rows = Vec::with_capacity(2 * seeds as usize);
    for seed in 0..seeds {
        let raw = stream.substream(2 * seed + 1).gaussian(n, d);
        let x = match graying {
            Some(g) => g.apply(&raw).map_err(VitError::from)?,
            None => raw,
        };
        for skip in [true, false] {
            let block = BlockConfig {
                skip_sab: skip,
                skip_ffn: true,
                prenorm: false,
            };
            let model = sab_probe_model(d, heads, block, stream.substream(2 * seed))?;
            let s = sab_jacobian_spectrum(&model, 0, &x)?;
            rows.push(JacobianRow {
                seed,
                skip,
                grayed: graying.is_some(),
                ln_kappa: spectrum_ln_kappa(&s),
                sigma_max: s[0],
                sigma_min: s[s.len() - 1],
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;
    use crate::vitcore::{BlockConfig, ImageShape, ModelSpec};

    #[test]
    fn zero_weights_with_skip_is_identity() {
        let image = ImageShape {
            height: 8,
            width: 8,
            channels: 1,
        };
        let mut m = ModelParams::init(&ModelSpec::new(image, 4, 8, 2, 1, 3), RngStream::new(3, 0)).unwrap();
        let a = &mut m.layers[0].attn;
        a.w_q = Matrix::zeros(8, 8);
        a.w_k = Matrix::zeros(8, 8);
        a.w_v = Matrix::zeros(8, 8);
        let x = RngStream::new(4, 0).gaussian(5, 8);
        let s = sab_jacobian_spectrum(&m, 0, &x).unwrap();
        assert_eq!(s.len(), 40);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));

        m.set_block_config(BlockConfig {
            skip_sab: false,
            ..BlockConfig::default()
        });
        let s = sab_jacobian_spectrum(&m, 0, &x).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-12));
        assert!(sab_jacobian_spectrum(&m, 1, &x).is_err());
    }
}
