use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::graying::{gray_batch, GrayingConfig};
use crate::linalg::{Matrix, RngStream};

use super::{
    activate, stack_tokens, Activation, Image, ImageShape, VitError, INIT_STD, MAX_PARAMS, NORM_EPS,
};

/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvMixerSpec {
    pub image: ImageShape,
    pub patch: usize,
    /// Feature channels `h`.
    pub channels: usize,
    pub depth: usize,
    /// Odd depthwise kernel side.
    pub kernel: usize,
    pub classes: usize,
    pub activation: Activation,
    /// Depthwise-stage skip.
    pub skip: bool,
}

impl ConvMixerSpec {
    pub fn validate(&self) -> Result<(), VitError> {
        self.image.patch_grid(self.patch)?;
        if self.kernel % 2 == 0 {
            return Err(VitError::Config(format!("kernel side {} must be odd", self.kernel)));
        }
        if self.channels == 0 || self.classes < 2 {
            return Err(VitError::Config("need channels > 0 and at least 2 classes".into()));
        }
        match self.param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => Err(VitError::Config(format!("model exceeds {MAX_PARAMS} parameters"))),
        }
    }

    /// Number of trainable scalars (running statistics excluded), `None` on
    /// overflow.
    pub fn param_count(&self) -> Option<usize> {
        let (_, patch_len) = self.image.patch_grid(self.patch).ok()?;
        let h = self.channels;
        let stem = patch_len.checked_add(3)?.checked_mul(h)?;
        let block = self
            .kernel
            .checked_mul(self.kernel)?
            .checked_add(h)?
            .checked_add(6)?
            .checked_mul(h)?;
        let head = h.checked_add(1)?.checked_mul(self.classes)?;
        stem.checked_add(block.checked_mul(self.depth)?)?.checked_add(head)
    }

    /// Spatial size of the feature map after the patch stem.
    pub fn grid(&self) -> (usize, usize) {
        (self.image.height / self.patch, self.image.width / self.patch)
    }
}

/// Batch normalization over the channel columns of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNormParams {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, c, 1.0),
            beta: Matrix::zeros(1, c),
            running_mean: Matrix::zeros(1, c),
            running_var: Matrix::filled(1, c, 1.0),
        }
    }

    /// Folds one batch's statistics into the running averages. `var` is the
    /// biased batch variance over `count` rows; the running variance tracks
    /// the unbiased estimate.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.running_mean.as_mut_slice().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.as_mut_slice().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Running averages.
    Eval,
    /// Identity.
    Bypass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvMixerBlockParams {
    /// `k² × h`, row `ky·k + kx`.
    pub depthwise: Matrix,
    pub depthwise_bias: Matrix,
    pub bn1: BatchNormParams,
    /// `h × h`.
    pub pointwise: Matrix,
    pub pointwise_bias: Matrix,
    pub bn2: BatchNormParams,
}

impl ConvMixerBlockParams {
    pub fn kernel_side(&self) -> usize {
        (self.depthwise.rows() as f64).sqrt().round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvMixerParams {
    pub spec: ConvMixerSpec,
    /// `patch_len × h`: the strided patch convolution.
    pub stem_w: Matrix,
    pub stem_b: Matrix,
    pub stem_bn: BatchNormParams,
    pub blocks: Vec<ConvMixerBlockParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

/// `batch` feature maps stored as a `(batch·H·W) × channels` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Matrix,
}

impl FeatureMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Matrix) -> Result<Self, VitError> {
        if data.rows() != batch * height * width {
            return Err(VitError::Shape(format!(
                "{} rows for {batch} maps of {height}x{width}",
                data.rows()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

#[derive(Clone, Copy, Debug)]
struct BnVars {
    gamma: Var,
    beta: Var,
}

#[derive(Clone, Copy, Debug)]
struct BlockVars {
    depthwise: Var,
    depthwise_bias: Var,
    bn1: BnVars,
    pointwise: Var,
    pointwise_bias: Var,
    bn2: BnVars,
}

/// Tape leaves for the trainable tensors of a [`ConvMixerParams`].
#[derive(Clone, Debug)]
pub struct BoundConvMixer {
    /// In [`ConvMixerParams::params`] order.
    pub all: Vec<Var>,
    stem_w: Var,
    stem_b: Var,
    stem_bn: BnVars,
    blocks: Vec<BlockVars>,
    head_w: Var,
    head_b: Var,
}

/// Batch statistics gathered in [`BnMode::Train`], in network order
/// (stem, then bn1 / bn2 of every block).
pub type BnStats = Vec<(Vec<f64>, Vec<f64>)>;

fn bn_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: BnVars,
    params: &BatchNormParams,
    mode: BnMode,
    stats: &mut BnStats,
) -> Result<Var, VitError> {
    let normed = match mode {
        BnMode::Bypass => return Ok(x),
        BnMode::Train => {
            let (y, mean, var) = tape.batch_norm(x, NORM_EPS)?;
            stats.push((mean, var));
            y
        }
        BnMode::Eval => {
            let shift = tape.leaf(params.running_mean.scale(-1.0));
            let inv = tape.leaf(params.running_var.map(|v| 1.0 / (v + NORM_EPS).sqrt()));
            let y = tape.add_row(x, shift)?;
            tape.mul_row(y, inv)?
        }
    };
    let y = tape.mul_row(normed, vars.gamma)?;
    Ok(tape.add_row(y, vars.beta)?)
}

/// Intermediate nodes of one block: `mixed = BN(σ(DW(x))) [+ x]`,
/// `out = BN(σ(PW(mixed)))`.
#[derive(Clone, Copy, Debug)]
struct BlockNodes {
    mixed: Var,
    out: Var,
}

#[allow(clippy::too_many_arguments)]
fn block_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    params: &ConvMixerBlockParams,
    geom: ConvGeometry,
    activation: Activation,
    skip: bool,
    mode: BnMode,
    stats: &mut BnStats,
) -> Result<BlockNodes, VitError> {
    let dw = tape.depthwise_conv(x, vars.depthwise, geom)?;
    let dw = tape.add_row(dw, vars.depthwise_bias)?;
    let a = activate(tape, dw, activation)?;
    let a = bn_on_tape(tape, a, vars.bn1, &params.bn1, mode, stats)?;
    let mixed = if skip { tape.add(a, x)? } else { a };
    let pw = tape.pointwise_conv(mixed, vars.pointwise, vars.pointwise_bias)?;
    let p = activate(tape, pw, activation)?;
    let out = bn_on_tape(tape, p, vars.bn2, &params.bn2, mode, stats)?;
    Ok(BlockNodes { mixed, out })
}

/// Output of [`convmixer_block`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMixerBlockOutput {
    /// After the depthwise stage and its optional skip.
    pub mixed: FeatureMap,
    /// After the pointwise stage.
    pub out: FeatureMap,
}

/// One ConvMixer block on a feature map. Running statistics are not updated.
pub fn convmixer_block(
    x: &FeatureMap,
    p: &ConvMixerBlockParams,
    activation: Activation,
    skip: bool,
    mode: BnMode,
) -> Result<ConvMixerBlockOutput, VitError> {
    let k = p.kernel_side();
    let c = x.channels();
    if p.depthwise.shape() != (k * k, c) || p.pointwise.shape() != (c, c) {
        return Err(VitError::Shape(format!(
            "block weights do not match {c} channels with a {k}x{k} kernel"
        )));
    }
    let geom = ConvGeometry {
        batch: x.batch,
        height: x.height,
        width: x.width,
        kernel: k,
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.data.clone());
    let vars = bind_block(&mut tape, p);
    let mut stats = Vec::new();
    let nodes = block_on_tape(&mut tape, xv, &vars, p, geom, activation, skip, mode, &mut stats)?;
    let map = |v: Var| -> Result<FeatureMap, VitError> {
        FeatureMap::new(x.batch, x.height, x.width, tape.value(v)?.clone())
    };
    Ok(ConvMixerBlockOutput {
        mixed: map(nodes.mixed)?,
        out: map(nodes.out)?,
    })
}

fn bind_block(tape: &mut Tape, p: &ConvMixerBlockParams) -> BlockVars {
    BlockVars {
        depthwise: tape.leaf(p.depthwise.clone()),
        depthwise_bias: tape.leaf(p.depthwise_bias.clone()),
        bn1: BnVars {
            gamma: tape.leaf(p.bn1.gamma.clone()),
            beta: tape.leaf(p.bn1.beta.clone()),
        },
        pointwise: tape.leaf(p.pointwise.clone()),
        pointwise_bias: tape.leaf(p.pointwise_bias.clone()),
        bn2: BnVars {
            gamma: tape.leaf(p.bn2.gamma.clone()),
            beta: tape.leaf(p.bn2.beta.clone()),
        },
    }
}

impl ConvMixerParams {
    pub fn init(spec: &ConvMixerSpec, stream: RngStream) -> Result<Self, VitError> {
        spec.validate()?;
        let mut s = stream.sampler();
        let h = spec.channels;
        let patch_len = spec.patch * spec.patch * spec.image.channels;
        let mut w = |r: usize, c: usize| s.truncated_normal(r, c, INIT_STD);
        let stem_w = w(patch_len, h);
        let blocks = (0..spec.depth)
            .map(|_| ConvMixerBlockParams {
                depthwise: w(spec.kernel * spec.kernel, h),
                depthwise_bias: Matrix::zeros(1, h),
                bn1: BatchNormParams::new(h),
                pointwise: w(h, h),
                pointwise_bias: Matrix::zeros(1, h),
                bn2: BatchNormParams::new(h),
            })
            .collect();
        let head_w = w(h, spec.classes);
        Ok(Self {
            spec: spec.clone(),
            stem_w,
            stem_b: Matrix::zeros(1, h),
            stem_bn: BatchNormParams::new(h),
            blocks,
            head_w,
            head_b: Matrix::zeros(1, spec.classes),
        })
    }

    /// Trainable tensors (name, value, weight-decay flag); running statistics
    /// are excluded.
    pub fn params(&self) -> Vec<(String, &Matrix, bool)> {
        let mut out: Vec<(String, &Matrix, bool)> = vec![
            ("stem.weight".into(), &self.stem_w, true),
            ("stem.bias".into(), &self.stem_b, false),
            ("stem.bn.gamma".into(), &self.stem_bn.gamma, false),
            ("stem.bn.beta".into(), &self.stem_bn.beta, false),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.depthwise"), &b.depthwise, true));
            out.push((format!("blocks.{i}.depthwise_bias"), &b.depthwise_bias, false));
            out.push((format!("blocks.{i}.bn1.gamma"), &b.bn1.gamma, false));
            out.push((format!("blocks.{i}.bn1.beta"), &b.bn1.beta, false));
            out.push((format!("blocks.{i}.pointwise"), &b.pointwise, true));
            out.push((format!("blocks.{i}.pointwise_bias"), &b.pointwise_bias, false));
            out.push((format!("blocks.{i}.bn2.gamma"), &b.bn2.gamma, false));
            out.push((format!("blocks.{i}.bn2.beta"), &b.bn2.beta, false));
        }
        out.push(("head.weight".into(), &self.head_w, true));
        out.push(("head.bias".into(), &self.head_b, false));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.slots_mut().0
    }

    /// Running statistics (name, value), stem first.
    pub fn buffers(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        out.push(("stem.bn.running_mean".to_string(), &self.stem_bn.running_mean));
        out.push(("stem.bn.running_var".to_string(), &self.stem_bn.running_var));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.bn1.running_mean"), &b.bn1.running_mean));
            out.push((format!("blocks.{i}.bn1.running_var"), &b.bn1.running_var));
            out.push((format!("blocks.{i}.bn2.running_mean"), &b.bn2.running_mean));
            out.push((format!("blocks.{i}.bn2.running_var"), &b.bn2.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        self.slots_mut().1
    }

    /// Mutable trainable tensors and running statistics, each in the order of
    /// [`params`](Self::params) and [`buffers`](Self::buffers).
    pub(crate) fn slots_mut(&mut self) -> (Vec<&mut Matrix>, Vec<&mut Matrix>) {
        let ConvMixerParams {
            stem_w,
            stem_b,
            stem_bn,
            blocks,
            head_w,
            head_b,
            ..
        } = self;
        let mut params: Vec<&mut Matrix> = vec![stem_w, stem_b, &mut stem_bn.gamma, &mut stem_bn.beta];
        let mut buffers: Vec<&mut Matrix> = vec![&mut stem_bn.running_mean, &mut stem_bn.running_var];
        for b in blocks.iter_mut() {
            params.push(&mut b.depthwise);
            params.push(&mut b.depthwise_bias);
            params.push(&mut b.bn1.gamma);
            params.push(&mut b.bn1.beta);
            params.push(&mut b.pointwise);
            params.push(&mut b.pointwise_bias);
            params.push(&mut b.bn2.gamma);
            params.push(&mut b.bn2.beta);
            buffers.push(&mut b.bn1.running_mean);
            buffers.push(&mut b.bn1.running_var);
            buffers.push(&mut b.bn2.running_mean);
            buffers.push(&mut b.bn2.running_var);
        }
        params.push(head_w);
        params.push(head_b);
        (params, buffers)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConvMixer {
        let stem_w = tape.leaf(self.stem_w.clone());
        let stem_b = tape.leaf(self.stem_b.clone());
        let stem_bn = BnVars {
            gamma: tape.leaf(self.stem_bn.gamma.clone()),
            beta: tape.leaf(self.stem_bn.beta.clone()),
        };
        let blocks: Vec<BlockVars> = self.blocks.iter().map(|b| bind_block(tape, b)).collect();
        let head_w = tape.leaf(self.head_w.clone());
        let head_b = tape.leaf(self.head_b.clone());
        let mut all = vec![stem_w, stem_b, stem_bn.gamma, stem_bn.beta];
        for b in &blocks {
            all.extend([
                b.depthwise,
                b.depthwise_bias,
                b.bn1.gamma,
                b.bn1.beta,
                b.pointwise,
                b.pointwise_bias,
                b.bn2.gamma,
                b.bn2.beta,
            ]);
        }
        all.extend([head_w, head_b]);
        BoundConvMixer {
            all,
            stem_w,
            stem_b,
            stem_bn,
            blocks,
            head_w,
            head_b,
        }
    }

    /// Logits for a batch of (already grayed) token matrices. Batch statistics
    /// are appended to `stats` in [`BnMode::Train`].
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundConvMixer,
        tokens: &[Matrix],
        mode: BnMode,
        stats: &mut BnStats,
    ) -> Result<Var, VitError> {
        let spec = &self.spec;
        let batch = tokens.len();
        if batch == 0 {
            return Err(VitError::Shape("empty batch".into()));
        }
        let (gh, gw) = spec.grid();
        let refs: Vec<&Matrix> = tokens.iter().collect();
        let x = tape.leaf(Matrix::vstack(&refs)?);
        let z = tape.pointwise_conv(x, bound.stem_w, bound.stem_b)?;
        let z = activate(tape, z, spec.activation)?;
        let mut h = bn_on_tape(tape, z, bound.stem_bn, &self.stem_bn, mode, stats)?;
        let geom = ConvGeometry {
            batch,
            height: gh,
            width: gw,
            kernel: spec.kernel,
        };
        for (l, (p, vars)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            h = block_on_tape(tape, h, vars, p, geom, spec.activation, spec.skip, mode, stats)
                .map_err(|e| e.in_layer(l))?
                .out;
        }
        let pooled = tape.segment_mean(h, gh * gw)?;
        let logits = tape.matmul(pooled, bound.head_w)?;
        Ok(tape.add_row(logits, bound.head_b)?)
    }

    /// Applies batch statistics collected by a [`BnMode::Train`] pass.
    pub fn update_running(&mut self, stats: &BnStats, count: usize) {
        let mut layers: Vec<&mut BatchNormParams> = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            layers.push(&mut b.bn1);
            layers.push(&mut b.bn2);
        }
        for (bn, (mean, var)) in layers.into_iter().zip(stats) {
            bn.update_running(mean, var, count);
        }
    }
}

/// Logits in evaluation mode (running statistics).
pub fn convmixer_forward(
    images: &[Image],
    model: &ConvMixerParams,
    graying: &GrayingConfig,
) -> Result<Matrix, VitError> {
    let tokens = gray_batch(&stack_tokens(images, model.spec.patch)?, graying)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.logits_on_tape(&mut tape, &bound, &tokens, BnMode::Eval, &mut Vec::new())?;
    Ok(tape.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(c: usize, k: usize, seed: u64) -> ConvMixerBlockParams {
        let s = RngStream::new(seed, 0);
        ConvMixerBlockParams {
            depthwise: s.substream(1).gaussian(k * k, c),
            depthwise_bias: Matrix::zeros(1, c),
            bn1: BatchNormParams::new(c),
            pointwise: s.substream(2).gaussian(c, c),
            pointwise_bias: Matrix::zeros(1, c),
            bn2: BatchNormParams::new(c),
        }
    }

    #[test]
    fn delta_kernel_doubles_with_skip() {
        let c = 3;
        let mut p = block(c, 3, 1);
        p.depthwise = Matrix::zeros(9, c);
        for ch in 0..c {
            p.depthwise.set(4, ch, 1.0);
        }
        let x = FeatureMap::new(2, 4, 4, RngStream::new(2, 0).gaussian(32, c)).unwrap();
        let out = convmixer_block(&x, &p, Activation::Linear, true, BnMode::Bypass).unwrap();
        assert!(out.mixed.data.max_abs_diff(&x.data.scale(2.0)).unwrap() < 1e-15);
    }

    #[test]
    fn zero_kernel_without_skip_is_zero() {
        let c = 2;
        let mut p = block(c, 3, 3);
        p.depthwise = Matrix::zeros(9, c);
        let x = FeatureMap::new(1, 3, 3, RngStream::new(4, 0).gaussian(9, c)).unwrap();
        let out = convmixer_block(&x, &p, Activation::Gelu, false, BnMode::Bypass).unwrap();
        assert_eq!(out.mixed.data.max_abs(), 0.0);
    }

    #[test]
    fn eval_mode_with_fresh_stats_is_affine_identity() {
        let p = block(2, 3, 5);
        let x = FeatureMap::new(1, 3, 3, RngStream::new(6, 0).gaussian(9, 2)).unwrap();
        let a = convmixer_block(&x, &p, Activation::Relu, true, BnMode::Eval).unwrap();
        let b = convmixer_block(&x, &p, Activation::Relu, true, BnMode::Bypass).unwrap();
        // Fresh running stats are mean 0, var 1: only the epsilon differs.
        assert!(a.out.data.max_abs_diff(&b.out.data).unwrap() < 1e-4);
    }

    #[test]
    fn params_bind_order() {
        let spec = ConvMixerSpec {
            image: ImageShape {
                height: 8,
                width: 8,
                channels: 3,
            },
            patch: 2,
            channels: 4,
            depth: 2,
            kernel: 3,
            classes: 3,
            activation: Activation::Gelu,
            skip: true,
        };
        let m = ConvMixerParams::init(&spec, RngStream::new(7, 0)).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let ps = m.params();
        assert_eq!(ps.len(), bound.all.len());
        for ((name, v, _), var) in ps.iter().zip(&bound.all) {
            assert_eq!(tape.value(*var).unwrap(), *v, "{name}");
        }
        assert_eq!(m.buffers().len(), 2 + 4 * spec.depth);
    }
}
