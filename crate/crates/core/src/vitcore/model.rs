use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::graying::{gray_batch, GrayingConfig};
use crate::linalg::{matmul, Matrix, RngStream};

use super::attention::{ffn_nodes, norm_on_tape, sab_on_tape};
use super::{
    stack_tokens, Activation, AttentionKind, AttentionParams, AttentionVars, BlockConfig,
    FfnParams, FfnVars, Image, ImageShape, VitError, DEFAULT_LINEAR_SCALE, INIT_STD, MAX_PARAMS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image: ImageShape,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub class_token: bool,
    /// Applied to every layer at initialization.
    #[serde(default)]
    pub block: BlockConfig,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub init: InitScheme,
}

/// Weight initialization. Both draw normals truncated at ±2σ; class token
/// and position embeddings always use σ = [`INIT_STD`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// σ = √(2 / (fan_in + fan_out)) per weight matrix.
    #[default]
    Glorot,
    /// σ = [`INIT_STD`] everywhere.
    Fixed,
}

impl InitScheme {
    fn std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::Glorot => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            InitScheme::Fixed => INIT_STD,
        }
    }
}

fn default_attention() -> AttentionKind {
    AttentionKind::Softmax
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_true() -> bool {
    true
}
fn default_mlp_ratio() -> usize {
    4
}

impl ModelSpec {
    /// ViT with softmax attention, GELU, class token, pre-norm and both skips.
    pub fn new(image: ImageShape, patch: usize, dim: usize, heads: usize, layers: usize, classes: usize) -> Self {
        Self {
            image,
            patch,
            dim,
            heads,
            layers,
            classes,
            attention: default_attention(),
            activation: default_activation(),
            class_token: true,
            block: BlockConfig::default(),
            mlp_ratio: 4,
            init: InitScheme::default(),
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        self.image.patch_grid(self.patch)?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(VitError::Config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.classes < 2 {
            return Err(VitError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.mlp_ratio == 0 {
            return Err(VitError::Config("mlp_ratio must be positive".into()));
        }
        if let AttentionKind::ScaledLinear { k } = self.attention {
            if !(k > 0.0 && k.is_finite()) {
                return Err(VitError::Config(format!("linear attention scale must be positive, got {k}")));
            }
        }
        match self.param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => Err(VitError::Config(format!("model exceeds {MAX_PARAMS} parameters"))),
        }
    }

    /// Number of trainable scalars, `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let (patches, patch_len) = self.image.patch_grid(self.patch).ok()?;
        let d = self.dim;
        let tokens = patches.checked_add(usize::from(self.class_token))?;
        let hidden = self.mlp_ratio.checked_mul(d)?;
        let embed = patch_len
            .checked_add(1)?
            .checked_add(usize::from(self.class_token))?
            .checked_add(tokens)?
            .checked_mul(d)?;
        let layer = d
            .checked_mul(3)?
            .checked_add(hidden.checked_mul(2)?)?
            .checked_add(4)?
            .checked_mul(d)?;
        let head = d.checked_add(1)?.checked_mul(self.classes)?;
        embed
            .checked_add(layer.checked_mul(self.layers)?)?
            .checked_add(2 * d)?
            .checked_add(head)
    }

    pub fn patches(&self) -> usize {
        (self.image.height / self.patch) * (self.image.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.image.channels
    }

    /// Sequence length seen by the attention blocks.
    pub fn tokens(&self) -> usize {
        self.patches() + usize::from(self.class_token)
    }
}

impl Default for ModelSpec {
    /// The toy configuration: 4 layers, dim 64, 4 heads on 16×16×3 inputs.
    fn default() -> Self {
        let image = ImageShape {
            height: 16,
            width: 16,
            channels: 3,
        };
        Self::new(image, 4, 64, 4, 4, 10)
    }
}

/// Affine part of a layer norm, both `1 × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams {
    /// `patch_len × d`.
    pub weight: Matrix,
    /// `1 × d`.
    pub bias: Matrix,
    /// `1 × d` when the model uses a class token.
    pub class_token: Option<Matrix>,
    /// `tokens × d`.
    pub pos: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
    pub config: BlockConfig,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub embed: PatchEmbedParams,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
    /// `d × classes`.
    pub head_w: Matrix,
    /// `1 × classes`.
    pub head_b: Matrix,
}

/// A named trainable tensor.
#[derive(Debug)]
pub struct Param<'a> {
    pub name: String,
    pub value: &'a Matrix,
    /// Whether weight decay applies (weights yes; biases, norms, embeddings no).
    pub decay: bool,
}

impl ModelParams {
    /// Truncated-normal weights per [`InitScheme`]; zero biases; unit norm
    /// gains.
    pub fn init(spec: &ModelSpec, stream: RngStream) -> Result<Self, VitError> {
        spec.validate()?;
        let mut s = stream.sampler();
        let d = spec.dim;
        let class_token = spec.class_token.then(|| s.truncated_normal(1, d, INIT_STD));
        let pos = s.truncated_normal(spec.tokens(), d, INIT_STD);
        let init = spec.init;
        let mut w = |r: usize, c: usize| s.truncated_normal(r, c, init.std(r, c));
        let weight = w(spec.patch_len(), d);
        let mut layers = Vec::with_capacity(spec.layers);
        for _ in 0..spec.layers {
            let attn = AttentionParams {
                w_q: w(d, d),
                w_k: w(d, d),
                w_v: w(d, d),
                heads: spec.heads,
                kind: spec.attention,
            };
            let ffn = FfnParams {
                w_up: w(d, spec.mlp_ratio * d),
                w_down: w(spec.mlp_ratio * d, d),
                activation: spec.activation,
            };
            layers.push(LayerParams {
                attn,
                ffn,
                config: spec.block,
                norm1: NormParams::identity(d),
                norm2: NormParams::identity(d),
            });
        }
        let head_w = w(d, spec.classes);
        Ok(Self {
            spec: spec.clone(),
            embed: PatchEmbedParams {
                weight,
                bias: Matrix::zeros(1, d),
                class_token,
                pos,
            },
            layers,
            final_norm: NormParams::identity(d),
            head_w,
            head_b: Matrix::zeros(1, spec.classes),
        })
    }

    /// Sets the block configuration of every layer.
    pub fn set_block_config(&mut self, cfg: BlockConfig) {
        self.spec.block = cfg;
        for l in &mut self.layers {
            l.config = cfg;
        }
    }

    /// Trainable tensors in a fixed order shared by [`params_mut`](Self::params_mut)
    /// and [`bind`](Self::bind).
    pub fn params(&self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        let mut push = |name: String, value, decay| push_param(&mut out, name, value, decay);
        push("embed.weight".into(), &self.embed.weight, true);
        push("embed.bias".into(), &self.embed.bias, false);
        if let Some(c) = &self.embed.class_token {
            push("embed.class_token".into(), c, false);
        }
        push("embed.pos".into(), &self.embed.pos, false);
        for (i, l) in self.layers.iter().enumerate() {
            push(format!("layers.{i}.norm1.gamma"), &l.norm1.gamma, false);
            push(format!("layers.{i}.norm1.beta"), &l.norm1.beta, false);
            push(format!("layers.{i}.attn.w_q"), &l.attn.w_q, true);
            push(format!("layers.{i}.attn.w_k"), &l.attn.w_k, true);
            push(format!("layers.{i}.attn.w_v"), &l.attn.w_v, true);
            push(format!("layers.{i}.norm2.gamma"), &l.norm2.gamma, false);
            push(format!("layers.{i}.norm2.beta"), &l.norm2.beta, false);
            push(format!("layers.{i}.ffn.w_up"), &l.ffn.w_up, true);
            push(format!("layers.{i}.ffn.w_down"), &l.ffn.w_down, true);
        }
        push("final_norm.gamma".into(), &self.final_norm.gamma, false);
        push("final_norm.beta".into(), &self.final_norm.beta, false);
        push("head.weight".into(), &self.head_w, true);
        push("head.bias".into(), &self.head_b, false);
        out
    }

    /// Mutable access in the order of [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.embed.weight, &mut self.embed.bias];
        if let Some(c) = &mut self.embed.class_token {
            out.push(c);
        }
        out.push(&mut self.embed.pos);
        for l in &mut self.layers {
            out.push(&mut l.norm1.gamma);
            out.push(&mut l.norm1.beta);
            out.push(&mut l.attn.w_q);
            out.push(&mut l.attn.w_k);
            out.push(&mut l.attn.w_v);
            out.push(&mut l.norm2.gamma);
            out.push(&mut l.norm2.beta);
            out.push(&mut l.ffn.w_up);
            out.push(&mut l.ffn.w_down);
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Records every trainable tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let all: Vec<Var> = self.params().iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("bind follows params order");
        let embed_w = next();
        let embed_b = next();
        let class_token = self.embed.class_token.as_ref().map(|_| next());
        let pos = next();
        let layers = self
            .layers
            .iter()
            .map(|_| {
                let norm1 = (next(), next());
                let attn = AttentionVars {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                };
                let norm2 = (next(), next());
                let ffn = FfnVars {
                    w_up: next(),
                    w_down: next(),
                };
                BoundLayer {
                    norm1,
                    attn,
                    norm2,
                    ffn,
                }
            })
            .collect();
        let final_norm = (next(), next());
        let head_w = next();
        let head_b = next();
        BoundModel {
            all,
            embed_w,
            embed_b,
            class_token,
            pos,
            layers,
            final_norm,
            head_w,
            head_b,
        }
    }

    /// Logits for `tokens` (one already-grayed token matrix per image),
    /// recorded on `tape`. Layer taps are appended to `taps` when given.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[Matrix],
        mut taps: Option<&mut Vec<TapVars>>,
    ) -> Result<Var, VitError> {
        let spec = &self.spec;
        let batch = tokens.len();
        if batch == 0 {
            return Err(VitError::Shape("empty batch".into()));
        }
        let expected = (spec.patches(), spec.patch_len());
        if let Some((i, t)) = tokens.iter().enumerate().find(|(_, t)| t.shape() != expected) {
            return Err(VitError::Shape(format!(
                "token matrix {i} is {}x{}, model expects {}x{}",
                t.rows(),
                t.cols(),
                expected.0,
                expected.1
            )));
        }
        let refs: Vec<&Matrix> = tokens.iter().collect();
        let x = tape.leaf(Matrix::vstack(&refs)?);
        let z = tape.matmul(x, bound.embed_w)?;
        let mut z = tape.add_row(z, bound.embed_b)?;
        let n = spec.tokens();
        if let Some(cls) = bound.class_token {
            let np = spec.patches();
            let mut parts = Vec::with_capacity(batch);
            for b in 0..batch {
                let zb = tape.slice_rows(z, b * np, np)?;
                parts.push(tape.concat_rows(&[cls, zb])?);
            }
            z = tape.concat_rows(&parts)?;
        }
        let pos = if batch == 1 {
            bound.pos
        } else {
            tape.concat_rows(&vec![bound.pos; batch])?
        };
        let mut h = tape.add(z, pos)?;

        for (l, (layer, vars)) in self.layers.iter().zip(&bound.layers).enumerate() {
            let step = (|| -> Result<(Var, TapVars), VitError> {
                let sab = sab_on_tape(
                    tape,
                    h,
                    &vars.attn,
                    layer.attn.heads,
                    layer.attn.kind,
                    layer.config,
                    Some(vars.norm1),
                    batch,
                )?;
                let ffn = ffn_nodes(
                    tape,
                    sab.out,
                    &vars.ffn,
                    layer.ffn.activation,
                    layer.config,
                    Some(vars.norm2),
                )?;
                Ok((
                    ffn.out,
                    TapVars {
                        input: h,
                        sa: sab.sa,
                        sa_skip: sab.with_skip,
                        mlp: ffn.mlp,
                        mlp_skip: ffn.with_skip,
                        sab_out: sab.out,
                        output: ffn.out,
                    },
                ))
            })();
            let (out, tap) = step.map_err(|e| e.in_layer(l))?;
            if let Some(t) = taps.as_deref_mut() {
                t.push(tap);
            }
            h = out;
        }

        let h = norm_on_tape(tape, h, Some(bound.final_norm))?;
        let pooled = if bound.class_token.is_some() {
            if batch == 1 {
                tape.slice_rows(h, 0, 1)?
            } else {
                let rows = (0..batch)
                    .map(|b| tape.slice_rows(h, b * n, 1))
                    .collect::<Result<Vec<_>, _>>()?;
                tape.concat_rows(&rows)?
            }
        } else {
            tape.segment_mean(h, n)?
        };
        let logits = tape.matmul(pooled, bound.head_w)?;
        Ok(tape.add_row(logits, bound.head_b)?)
    }
}

fn push_param<'a>(out: &mut Vec<Param<'a>>, name: String, value: &'a Matrix, decay: bool) {
    out.push(Param { name, value, decay });
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BoundLayer {
    pub norm1: (Var, Var),
    pub attn: AttentionVars,
    pub norm2: (Var, Var),
    pub ffn: FfnVars,
}

/// Tape leaves for every trainable tensor of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    /// In [`ModelParams::params`] order.
    pub all: Vec<Var>,
    embed_w: Var,
    embed_b: Var,
    class_token: Option<Var>,
    pos: Var,
    layers: Vec<BoundLayer>,
    final_norm: (Var, Var),
    head_w: Var,
    head_b: Var,
}

/// Tape nodes of one layer's embeddings.
#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    pub input: Var,
    pub sa: Var,
    pub sa_skip: Var,
    pub mlp: Var,
    pub mlp_skip: Var,
    pub sab_out: Var,
    pub output: Var,
}

/// Embeddings of one layer for a whole batch, images stacked along rows
/// (`tokens` rows per image).
///
/// `sa` is the attention output without skip, `sa_skip` the same plus the
/// block input, `mlp` / `mlp_skip` likewise for the FFN. `input` enters the
/// self-attention block and `sab_out` leaves it.
#[derive(Clone, Debug)]
pub struct LayerTaps {
    pub input: Matrix,
    pub sa: Matrix,
    pub sa_skip: Matrix,
    pub mlp: Matrix,
    pub mlp_skip: Matrix,
    pub sab_out: Matrix,
    pub output: Matrix,
}

/// Non-overlapping patches of `image`, linearly projected, with the class
/// token prepended and positions added when `params` carries them.
pub fn patch_embed(image: &Image, params: &PatchEmbedParams, patch: usize) -> Result<Matrix, VitError> {
    let tokens = super::tokenize(image, patch)?;
    let mut z = matmul(&tokens, &params.weight)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(params.bias.as_slice()) {
            *v += b;
        }
    }
    if let Some(c) = &params.class_token {
        z = Matrix::vstack(&[c, &z])?;
    }
    if params.pos.len() > 0 {
        z = z.add(&params.pos)?;
    }
    Ok(z)
}

fn prepare_tokens(images: &[Image], model: &ModelParams, graying: &GrayingConfig) -> Result<Vec<Matrix>, VitError> {
    let tokens = stack_tokens(images, model.spec.patch)?;
    Ok(gray_batch(&tokens, graying)?)
}

/// Logits (`batch × classes`): graying, patch embedding, the layer stack,
/// final norm and the class-token head.
pub fn vit_forward(images: &[Image], model: &ModelParams, graying: &GrayingConfig) -> Result<Matrix, VitError> {
    let tokens = prepare_tokens(images, model, graying)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.logits_on_tape(&mut tape, &bound, &tokens, None)?;
    Ok(tape.value(out)?.clone())
}

/// [`vit_forward`] that also returns every layer's embeddings.
pub fn vit_forward_with_taps(
    images: &[Image],
    model: &ModelParams,
    graying: &GrayingConfig,
) -> Result<(Matrix, Vec<LayerTaps>), VitError> {
    let tokens = prepare_tokens(images, model, graying)?;
    tokens_forward_with_taps(&tokens, model)
}

pub(crate) fn tokens_forward_with_taps(
    tokens: &[Matrix],
    model: &ModelParams,
) -> Result<(Matrix, Vec<LayerTaps>), VitError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut taps = Vec::new();
    let out = model.logits_on_tape(&mut tape, &bound, tokens, Some(&mut taps))?;
    let v = |x: Var| tape.value(x).cloned();
    let layers = taps
        .iter()
        .map(|t| {
            Ok(LayerTaps {
                input: v(t.input)?,
                sa: v(t.sa)?,
                sa_skip: v(t.sa_skip)?,
                mlp: v(t.mlp)?,
                mlp_skip: v(t.mlp_skip)?,
                sab_out: v(t.sab_out)?,
                output: v(t.output)?,
            })
        })
        .collect::<Result<Vec<_>, crate::autodiff::AutodiffError>>()?;
    Ok((tape.value(out)?.clone(), layers))
}

/// Scaled-linear attention kind with the default scale.
pub fn default_linear_attention() -> AttentionKind {
    AttentionKind::ScaledLinear {
        k: DEFAULT_LINEAR_SCALE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(layers: usize) -> ModelSpec {
        let image = ImageShape {
            height: 8,
            width: 8,
            channels: 2,
        };
        ModelSpec::new(image, 4, 8, 2, layers, 3)
    }

    fn images(n: usize, seed: u64) -> Vec<Image> {
        let spec = tiny_spec(1);
        (0..n)
            .map(|i| {
                let m = RngStream::new(seed, i as u64).gaussian(1, spec.image.len());
                Image::new(spec.image, m.into_vec()).unwrap()
            })
            .collect()
    }

    #[test]
    fn params_and_bind_agree() {
        let model = ModelParams::init(&tiny_spec(2), RngStream::new(1, 0)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let params = model.params();
        assert_eq!(params.len(), bound.all.len());
        for (p, v) in params.iter().zip(&bound.all) {
            assert_eq!(tape.value(*v).unwrap(), p.value, "{}", p.name);
        }
        let mut m2 = model.clone();
        let shapes: Vec<_> = m2.params_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, params.iter().map(|p| p.value.shape()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_stack_is_head_of_embedding() {
        let model = ModelParams::init(&tiny_spec(0), RngStream::new(2, 0)).unwrap();
        let imgs = images(1, 3);
        let logits = vit_forward(&imgs, &model, &GrayingConfig::none()).unwrap();
        let z = patch_embed(&imgs[0], &model.embed, 4).unwrap();
        let cls = z.row_block(0, 1);
        let mean = cls.sum() / cls.len() as f64;
        let var = cls.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cls.len() as f64;
        let normed = cls.map(|v| (v - mean) / (var + super::super::NORM_EPS).sqrt());
        let expected = matmul(&normed, &model.head_w).unwrap().add(&model.head_b).unwrap();
        assert!(logits.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn batch_rows_are_independent() {
        let model = ModelParams::init(&tiny_spec(2), RngStream::new(4, 0)).unwrap();
        let imgs = images(3, 5);
        let all = vit_forward(&imgs, &model, &GrayingConfig::none()).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let one = vit_forward(std::slice::from_ref(img), &model, &GrayingConfig::none()).unwrap();
            assert!(one.max_abs_diff(&all.row_block(i, 1)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn unit_dct_graying_is_transparent() {
        let model = ModelParams::init(&tiny_spec(2), RngStream::new(6, 0)).unwrap();
        let imgs = images(2, 7);
        let a = vit_forward(&imgs, &model, &GrayingConfig::none()).unwrap();
        let b = vit_forward(&imgs, &model, &GrayingConfig::dct(1.0)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn embed_counts_tokens() {
        let spec = tiny_spec(1);
        let model = ModelParams::init(&spec, RngStream::new(8, 0)).unwrap();
        let z = patch_embed(&images(1, 9)[0], &model.embed, 4).unwrap();
        assert_eq!(z.shape(), (5, 8));
        assert!(tokenize_err(&spec));
    }

    fn tokenize_err(spec: &ModelSpec) -> bool {
        let mut bad = spec.clone();
        bad.patch = 3;
        bad.validate().is_err()
    }
}
