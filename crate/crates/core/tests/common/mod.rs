//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use skipcond::autodiff::{grad_check, numeric_jacobian, AutodiffError, ConvGeometry, Tape, Var};
use skipcond::harness::Network;
use skipcond::linalg::{Matrix, RngStream};
use skipcond::vitcore::{
    attention_on_tape, default_linear_attention, ffn_on_tape, Activation, AttentionKind, AttentionParams,
    BlockConfig, ConvMixerSpec, FfnParams, ImageShape, ModelSpec, NORM_EPS,
};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;

pub type ScalarFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var, AutodiffError>>;

pub fn gauss(rows: usize, cols: usize, id: u64) -> Matrix {
    RngStream::new(1234, id).gaussian(rows, cols)
}

/// `Σ y ⊙ W` for a fixed random `W`, so no entry of `y` gets a symmetric,
/// cancelling gradient.
pub fn project(t: &mut Tape, y: Var, id: u64) -> Result<Var, AutodiffError> {
    let (r, c) = t.shape(y)?;
    let w = t.leaf(gauss(r, c, 10_000 + id));
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// One scalar-valued test function per tape primitive (and per operand for
/// the binary ones), with an input point where it is smooth.
pub fn primitive_cases() -> Vec<(&'static str, Matrix, ScalarFn)> {
    let away_from_zero = gauss(4, 5, 3).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let geom = ConvGeometry {
        batch: 2,
        height: 3,
        width: 4,
        kernel: 3,
    };
    let cases: Vec<(&'static str, Matrix, ScalarFn)> = vec![
        ("matmul_left", gauss(3, 4, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(4, 2, 2));
            let y = t.matmul(x, b)?;
            project(t, y, 1)
        })),
        ("matmul_right", gauss(4, 2, 1), Box::new(|t, x| {
            let a = t.leaf(gauss(3, 4, 2));
            let y = t.matmul(a, x)?;
            project(t, y, 2)
        })),
        ("add", gauss(3, 4, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(3, 4, 2));
            let y = t.add(x, b)?;
            let y = t.mul(y, y)?;
            project(t, y, 3)
        })),
        ("sub", gauss(3, 4, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(3, 4, 2));
            let y = t.sub(b, x)?;
            let y = t.mul(y, y)?;
            project(t, y, 4)
        })),
        ("mul", gauss(3, 4, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(3, 4, 2));
            let y = t.mul(x, b)?;
            project(t, y, 5)
        })),
        ("mul_self", gauss(3, 4, 1), Box::new(|t, x| {
            let y = t.mul(x, x)?;
            project(t, y, 6)
        })),
        ("scale", gauss(3, 4, 1), Box::new(|t, x| {
            let y = t.scale(x, -2.5)?;
            project(t, y, 7)
        })),
        ("transpose", gauss(3, 4, 1), Box::new(|t, x| {
            let y = t.transpose(x)?;
            project(t, y, 8)
        })),
        ("add_row_matrix", gauss(3, 4, 1), Box::new(|t, x| {
            let r = t.leaf(gauss(1, 4, 2));
            let y = t.add_row(x, r)?;
            let y = t.mul(y, y)?;
            project(t, y, 9)
        })),
        ("add_row_row", gauss(1, 4, 1), Box::new(|t, x| {
            let m = t.leaf(gauss(3, 4, 2));
            let y = t.add_row(m, x)?;
            let y = t.mul(y, y)?;
            project(t, y, 10)
        })),
        ("mul_row_matrix", gauss(3, 4, 1), Box::new(|t, x| {
            let r = t.leaf(gauss(1, 4, 2));
            let y = t.mul_row(x, r)?;
            project(t, y, 11)
        })),
        ("mul_row_row", gauss(1, 4, 1), Box::new(|t, x| {
            let m = t.leaf(gauss(3, 4, 2));
            let y = t.mul_row(m, x)?;
            project(t, y, 12)
        })),
        ("row_softmax", gauss(3, 5, 1), Box::new(|t, x| {
            let y = t.row_softmax(x)?;
            project(t, y, 13)
        })),
        ("layer_norm", gauss(3, 6, 1), Box::new(|t, x| {
            let y = t.layer_norm(x, NORM_EPS)?;
            project(t, y, 14)
        })),
        ("batch_norm", gauss(6, 3, 1), Box::new(|t, x| {
            let (y, _, _) = t.batch_norm(x, NORM_EPS)?;
            project(t, y, 15)
        })),
        ("gelu", gauss(3, 4, 1).scale(2.0), Box::new(|t, x| {
            let y = t.gelu(x)?;
            project(t, y, 16)
        })),
        ("relu", away_from_zero, Box::new(|t, x| {
            let y = t.relu(x)?;
            project(t, y, 17)
        })),
        ("powf", gauss(3, 4, 1).map(|v| v.abs() + 0.5), Box::new(|t, x| {
            let y = t.powf(x, 0.7)?;
            project(t, y, 18)
        })),
        ("depthwise_input", gauss(24, 2, 1), Box::new(move |t, x| {
            let k = t.leaf(gauss(9, 2, 2));
            let y = t.depthwise_conv(x, k, geom)?;
            project(t, y, 19)
        })),
        ("depthwise_kernel", gauss(9, 2, 1), Box::new(move |t, x| {
            let input = t.leaf(gauss(24, 2, 2));
            let y = t.depthwise_conv(input, x, geom)?;
            project(t, y, 20)
        })),
        ("pointwise_conv", gauss(3, 3, 1), Box::new(|t, x| {
            let input = t.leaf(gauss(5, 3, 2));
            let b = t.leaf(gauss(1, 3, 3));
            let y = t.pointwise_conv(input, x, b)?;
            project(t, y, 21)
        })),
        ("slice_cols", gauss(3, 5, 1), Box::new(|t, x| {
            let y = t.slice_cols(x, 1, 3)?;
            project(t, y, 22)
        })),
        ("slice_rows", gauss(5, 3, 1), Box::new(|t, x| {
            let y = t.slice_rows(x, 2, 2)?;
            project(t, y, 23)
        })),
        ("concat_cols", gauss(3, 2, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(3, 1, 2));
            let y = t.concat_cols(&[x, b, x])?;
            project(t, y, 24)
        })),
        ("concat_rows", gauss(2, 3, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(1, 3, 2));
            let y = t.concat_rows(&[b, x, x])?;
            project(t, y, 25)
        })),
        ("segment_mean", gauss(6, 3, 1), Box::new(|t, x| {
            let y = t.segment_mean(x, 3)?;
            project(t, y, 26)
        })),
        ("sum", gauss(3, 4, 1), Box::new(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        })),
        ("cross_entropy", gauss(4, 5, 1), Box::new(|t, x| t.cross_entropy(x, &[0, 4, 2, 2]))),
        ("mse", gauss(3, 4, 1), Box::new(|t, x| {
            let b = t.leaf(gauss(3, 4, 2));
            t.mse(x, b)
        })),
    ];
    cases
}

pub fn attention_params(d: usize, heads: usize, kind: AttentionKind, id: u64) -> AttentionParams {
    let s = 1.0 / (d as f64).sqrt();
    AttentionParams {
        w_q: gauss(d, d, id).scale(s),
        w_k: gauss(d, d, id + 1).scale(s),
        w_v: gauss(d, d, id + 2).scale(s),
        heads,
        kind,
    }
}

pub fn ffn_params(d: usize, activation: Activation, id: u64) -> FfnParams {
    FfnParams {
        w_up: gauss(d, 4 * d, id).scale(1.0 / (d as f64).sqrt()),
        w_down: gauss(4 * d, d, id + 1).scale(0.5 / (d as f64).sqrt()),
        activation,
    }
}

/// Self-attention block assembled from public tape pieces: plain layer norm
/// when pre-norm is on, attention, optional skip.
pub fn sab_tape(t: &mut Tape, x: Var, p: &AttentionParams, cfg: BlockConfig) -> Result<Var, AutodiffError> {
    let w = p.bind(t);
    let input = if cfg.prenorm { t.layer_norm(x, NORM_EPS)? } else { x };
    let sa = attention_on_tape(t, input, &w, p.heads, p.kind, 1).map_err(|e| AutodiffError::Geometry(e.to_string()))?;
    if cfg.skip_sab {
        t.add(sa, x)
    } else {
        Ok(sa)
    }
}

pub fn ffn_tape(t: &mut Tape, x: Var, p: &FfnParams, cfg: BlockConfig) -> Result<Var, AutodiffError> {
    let w = p.bind(t);
    ffn_on_tape(t, x, &w, p.activation, cfg, None).map_err(|e| AutodiffError::Geometry(e.to_string()))
}

/// Maximum of `|a − b| / max(|a|, |b|, 1e-3)` over entries.
pub fn max_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Worst grad-check error over every primitive case, with its name.
pub fn worst_primitive() -> (&'static str, f64) {
    let mut worst = ("", 0.0);
    for (name, x, f) in primitive_cases() {
        let r = grad_check(f, &x, FD_STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
        if r.max_rel_error >= worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    worst
}

/// Reverse-mode Jacobians of composed blocks against central differences of
/// the public forward functions. Returns `(label, max rel error)`.
pub fn block_jacobian_errors() -> Vec<(String, f64)> {
    use skipcond::autodiff::jacobian;
    use skipcond::vitcore::{ffn_forward, sab_forward};

    let mut out = Vec::new();
    let x = gauss(5, 8, 77);
    let kinds = [AttentionKind::Softmax, default_linear_attention()];
    for (ki, kind) in kinds.into_iter().enumerate() {
        let p = attention_params(8, 2, kind, 100 + 3 * ki as u64);
        for cfg in block_configs() {
            let rev = jacobian(|t, xv| sab_tape(t, xv, &p, cfg), &x).unwrap();
            let num = numeric_jacobian(
                |m| sab_forward(m, &p, cfg).map_err(|e| AutodiffError::Geometry(e.to_string())),
                &x,
                FD_STEP,
            )
            .unwrap();
            out.push((format!("sab {kind:?} {cfg:?}"), max_rel_error(&rev, &num)));
        }
    }
    for act in [Activation::Gelu, Activation::Linear] {
        let p = ffn_params(8, act, 200);
        for cfg in block_configs() {
            let rev = jacobian(|t, xv| ffn_tape(t, xv, &p, cfg), &x).unwrap();
            let num = numeric_jacobian(
                |m| ffn_forward(m, &p, cfg).map_err(|e| AutodiffError::Geometry(e.to_string())),
                &x,
                FD_STEP,
            )
            .unwrap();
            out.push((format!("ffn {act:?} {cfg:?}"), max_rel_error(&rev, &num)));
        }
    }
    out
}

fn block_configs() -> Vec<BlockConfig> {
    let mut v = Vec::new();
    for skip in [true, false] {
        for prenorm in [true, false] {
            v.push(BlockConfig {
                skip_sab: skip,
                skip_ffn: skip,
                prenorm,
            });
        }
    }
    v
}

/// Parameter gradients of a whole network's batch loss against central
/// differences of the same loss, entry by entry.
pub fn network_grad_error(net: &Network, tokens: &[Matrix], labels: &[usize]) -> f64 {
    let mut base = net.clone();
    let (_, grads) = base.loss_and_grads(tokens, labels).unwrap();
    let loss_at = |net: &Network| net.clone().loss_and_grads(tokens, labels).unwrap().0;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            nudge(&mut plus, k, idx, FD_STEP);
            nudge(&mut minus, k, idx, -FD_STEP);
            let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            let a = g.as_slice()[idx];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3));
        }
    }
    worst
}

fn nudge(net: &mut Network, tensor: usize, idx: usize, h: f64) {
    let params = match net {
        Network::Vit(m) => m.params_mut(),
        Network::ConvMixer(m) => m.params_mut(),
    };
    let mut params = params;
    params[tensor].as_mut_slice()[idx] += h;
}

pub fn tiny_image() -> ImageShape {
    ImageShape {
        height: 4,
        width: 4,
        channels: 2,
    }
}

pub fn tiny_vit_spec() -> ModelSpec {
    ModelSpec::new(tiny_image(), 2, 4, 2, 2, 3)
}

/// A tiny ViT at a point suited to finite differences. The initial class
/// token and positions are 0.02-scale, so the first layer norm of the class
/// row divides by a tiny spread and central differences lose accuracy to
/// curvature; here they are brought to unit scale.
pub fn tiny_vit_for_fd(seed: u64) -> skipcond::vitcore::ModelParams {
    let mut m = skipcond::vitcore::ModelParams::init(&tiny_vit_spec(), RngStream::new(seed, 0)).unwrap();
    m.embed.pos = m.embed.pos.scale(25.0);
    m.embed.class_token = m.embed.class_token.map(|c| c.scale(25.0));
    m
}

pub fn tiny_convmixer_spec() -> ConvMixerSpec {
    ConvMixerSpec {
        image: tiny_image(),
        patch: 2,
        channels: 3,
        depth: 1,
        kernel: 3,
        classes: 3,
        activation: Activation::Gelu,
        skip: true,
    }
}

/// Gaussian token batch shaped for [`tiny_image`] with patch 2.
pub fn tiny_tokens(batch: usize, id: u64) -> (Vec<Matrix>, Vec<usize>) {
    let tokens = (0..batch).map(|b| gauss(4, 8, id + b as u64)).collect();
    let labels = (0..batch).map(|b| b % 3).collect();
    (tokens, labels)
}
