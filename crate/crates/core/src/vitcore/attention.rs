use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;

use super::{activate, Activation, AttentionKind, BlockConfig, VitError, NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d × d`; head `j` uses columns `j·d_h .. (j+1)·d_h`.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub heads: usize,
    pub kind: AttentionKind,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let d = self.w_q.rows();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != (d, d) {
                return Err(VitError::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(VitError::Config(format!("{} heads do not divide dim {d}", self.heads)));
        }
        if let AttentionKind::ScaledLinear { k } = self.kind {
            if !(k > 0.0 && k.is_finite()) {
                return Err(VitError::Config(format!("linear attention scale must be positive, got {k}")));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    /// `d × 4d`.
    pub w_up: Matrix,
    /// `4d × d`.
    pub w_down: Matrix,
    pub activation: Activation,
}

impl FfnParams {
    pub fn validate(&self) -> Result<(), VitError> {
        let (d, h) = self.w_up.shape();
        if self.w_down.shape() != (h, d) {
            return Err(VitError::Shape(format!(
                "w_up {d}x{h} and w_down {}x{} do not chain back to {d}",
                self.w_down.rows(),
                self.w_down.cols()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> FfnVars {
        FfnVars {
            w_up: tape.leaf(self.w_up.clone()),
            w_down: tape.leaf(self.w_down.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w_up: Var,
    pub w_down: Var,
}

/// Multi-head attention over `batch` stacked sequences of equal length.
///
/// `x` holds the sequences one after another (`batch·n × d`). Heads are
/// concatenated along columns; there is no output projection.
pub fn attention_on_tape(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    heads: usize,
    kind: AttentionKind,
    batch: usize,
) -> Result<Var, VitError> {
    let (rows, d) = tape.shape(x)?;
    if batch == 0 || rows % batch != 0 || rows == 0 {
        return Err(VitError::Shape(format!("{rows} rows do not split into {batch} sequences")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(VitError::Config(format!("{heads} heads do not divide dim {d}")));
    }
    let n = rows / batch;
    let dh = d / heads;
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let mut head_cols = Vec::with_capacity(heads);
    for h in 0..heads {
        head_cols.push((
            tape.slice_cols(q, h * dh, dh)?,
            tape.slice_cols(k, h * dh, dh)?,
            tape.slice_cols(v, h * dh, dh)?,
        ));
    }
    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut outs = Vec::with_capacity(heads);
        for &(qh, kh, vh) in &head_cols {
            let (qb, kb, vb) = if batch == 1 {
                (qh, kh, vh)
            } else {
                (
                    tape.slice_rows(qh, b * n, n)?,
                    tape.slice_rows(kh, b * n, n)?,
                    tape.slice_rows(vh, b * n, n)?,
                )
            };
            let kt = tape.transpose(kb)?;
            let scores = tape.matmul(qb, kt)?;
            let weights = match kind {
                AttentionKind::Softmax => {
                    let s = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                    tape.row_softmax(s)?
                }
                AttentionKind::ScaledLinear { k } => tape.scale(scores, 1.0 / k)?,
            };
            outs.push(tape.matmul(weights, vb)?);
        }
        samples.push(if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? });
    }
    Ok(if batch == 1 {
        samples[0]
    } else {
        tape.concat_rows(&samples)?
    })
}

/// Layer normalization with optional affine parameters (`1 × d` rows).
pub(crate) fn norm_on_tape(
    tape: &mut Tape,
    x: Var,
    affine: Option<(Var, Var)>,
) -> Result<Var, VitError> {
    let y = tape.layer_norm(x, NORM_EPS)?;
    Ok(match affine {
        Some((gamma, beta)) => {
            let y = tape.mul_row(y, gamma)?;
            tape.add_row(y, beta)?
        }
        None => y,
    })
}

/// Intermediate nodes of one self-attention block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SabNodes {
    /// `SA(norm(x))`.
    pub sa: Var,
    /// `SA(norm(x)) + x`.
    pub with_skip: Var,
    /// Whichever of the two the block passes on.
    pub out: Var,
}

pub(crate) fn sab_on_tape(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    heads: usize,
    kind: AttentionKind,
    cfg: BlockConfig,
    norm: Option<(Var, Var)>,
    batch: usize,
) -> Result<SabNodes, VitError> {
    let input = if cfg.prenorm { norm_on_tape(tape, x, norm)? } else { x };
    let sa = attention_on_tape(tape, input, w, heads, kind, batch)?;
    let with_skip = tape.add(sa, x)?;
    Ok(SabNodes {
        sa,
        with_skip,
        out: if cfg.skip_sab { with_skip } else { sa },
    })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnNodes {
    pub mlp: Var,
    pub with_skip: Var,
    pub out: Var,
}

/// `W_down(g(W_up · norm(x)))`, plus `x` when the FFN skip is on. Row-vector
/// convention: tokens are rows, so the product reads `x·W_up·W_down`.
pub fn ffn_on_tape(
    tape: &mut Tape,
    x: Var,
    w: &FfnVars,
    activation: Activation,
    cfg: BlockConfig,
    norm: Option<(Var, Var)>,
) -> Result<Var, VitError> {
    Ok(ffn_nodes(tape, x, w, activation, cfg, norm)?.out)
}

pub(crate) fn ffn_nodes(
    tape: &mut Tape,
    x: Var,
    w: &FfnVars,
    activation: Activation,
    cfg: BlockConfig,
    norm: Option<(Var, Var)>,
) -> Result<FfnNodes, VitError> {
    let input = if cfg.prenorm { norm_on_tape(tape, x, norm)? } else { x };
    let up = tape.matmul(input, w.w_up)?;
    let act = activate(tape, up, activation)?;
    let mlp = tape.matmul(act, w.w_down)?;
    let with_skip = tape.add(mlp, x)?;
    Ok(FfnNodes {
        mlp,
        with_skip,
        out: if cfg.skip_ffn { with_skip } else { mlp },
    })
}

/// Multi-head self-attention of one token matrix.
pub fn self_attention(x: &Matrix, p: &AttentionParams) -> Result<Matrix, VitError> {
    p.validate()?;
    check_dim(x, p.dim())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = p.bind(&mut tape);
    let out = attention_on_tape(&mut tape, xv, &w, p.heads, p.kind, 1)?;
    Ok(tape.value(out)?.clone())
}

/// Self-attention block: `SA(norm(x)) + x` with the skip on, `SA(norm(x))`
/// without. `norm` is a plain (non-affine) layer norm when `cfg.prenorm`.
pub fn sab_forward(x: &Matrix, p: &AttentionParams, cfg: BlockConfig) -> Result<Matrix, VitError> {
    p.validate()?;
    check_dim(x, p.dim())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = p.bind(&mut tape);
    let nodes = sab_on_tape(&mut tape, xv, &w, p.heads, p.kind, cfg, None, 1)?;
    Ok(tape.value(nodes.out)?.clone())
}

/// Feed-forward block; the skip is controlled by `cfg.skip_ffn`.
pub fn ffn_forward(x: &Matrix, p: &FfnParams, cfg: BlockConfig) -> Result<Matrix, VitError> {
    p.validate()?;
    check_dim(x, p.w_up.rows())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = p.bind(&mut tape);
    let out = ffn_on_tape(&mut tape, xv, &w, p.activation, cfg, None)?;
    Ok(tape.value(out)?.clone())
}

fn check_dim(x: &Matrix, d: usize) -> Result<(), VitError> {
    if x.cols() != d || x.rows() == 0 {
        return Err(VitError::Shape(format!(
            "tokens are {}x{}, weights expect dim {d}",
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}
