use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, Tape};
use crate::diagnostics::{layer_condition_profile, Tap};
use crate::graying::{gray_batch, GrayingConfig};
use crate::linalg::io::encode_matrices;
use crate::linalg::{Matrix, RngStream};
use crate::vitcore::{
    stack_tokens, write_checkpoint, BnMode, Checkpoint, ConvMixerParams, ModelParams, VitError,
};

use super::config::{DatasetSpec, ExperimentConfig, ModelConfig};
use super::data::{load_cifar10, synth_dataset, ChannelNorm, DatasetHandle, Sample};
use super::optim::AdamW;
use super::HarnessError;

const EVAL_BATCH: usize = 64;

/// Stream ids derived from the run seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

/// A trainable network of either architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Vit(ModelParams),
    ConvMixer(ConvMixerParams),
}

impl Network {
    pub fn init(model: &ModelConfig, stream: RngStream) -> Result<Self, VitError> {
        Ok(match model {
            ModelConfig::Vit(spec) => Network::Vit(ModelParams::init(spec, stream)?),
            ModelConfig::ConvMixer(spec) => Network::ConvMixer(ConvMixerParams::init(spec, stream)?),
        })
    }

    pub fn patch(&self) -> usize {
        match self {
            Network::Vit(m) => m.spec.patch,
            Network::ConvMixer(m) => m.spec.patch,
        }
    }

    fn param_values(&self) -> Vec<Matrix> {
        match self {
            Network::Vit(m) => m.params().into_iter().map(|p| p.value.clone()).collect(),
            Network::ConvMixer(m) => m.params().into_iter().map(|(_, v, _)| v.clone()).collect(),
        }
    }

    fn decay_flags(&self) -> Vec<bool> {
        match self {
            Network::Vit(m) => m.params().iter().map(|p| p.decay).collect(),
            Network::ConvMixer(m) => m.params().iter().map(|p| p.2).collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Network::Vit(m) => m.params_mut(),
            Network::ConvMixer(m) => m.params_mut(),
        }
    }

    /// SHA-256 of the trainable tensors in matrix-container encoding; block
    /// configuration does not enter the hash.
    pub fn param_hash(&self) -> String {
        let digest = Sha256::digest(encode_matrices(&self.param_values()));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Network::Vit(m) => m.to_checkpoint(),
            Network::ConvMixer(m) => m.to_checkpoint(),
        }
    }

    /// Mean cross-entropy of one batch and the gradient of every trainable
    /// tensor. ConvMixer batch-norm running statistics are updated.
    pub fn loss_and_grads(&mut self, tokens: &[Matrix], labels: &[usize]) -> Result<(f64, Vec<Matrix>), VitError> {
        let mut tape = Tape::new();
        let (loss, vars) = match self {
            Network::Vit(m) => {
                let bound = m.bind(&mut tape);
                let logits = m.logits_on_tape(&mut tape, &bound, tokens, None)?;
                (tape.cross_entropy(logits, labels)?, bound.all)
            }
            Network::ConvMixer(m) => {
                let bound = m.bind(&mut tape);
                let mut stats = Vec::new();
                let logits = m.logits_on_tape(&mut tape, &bound, tokens, BnMode::Train, &mut stats)?;
                let loss = tape.cross_entropy(logits, labels)?;
                let (gh, gw) = m.spec.grid();
                m.update_running(&stats, tokens.len() * gh * gw);
                (loss, bound.all)
            }
        };
        let value = tape.value(loss)?.get(0, 0);
        let grads = tape.backward(loss)?;
        let grads = vars.iter().map(|&v| grads.get(v)).collect::<Result<Vec<_>, _>>()?;
        Ok((value, grads))
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, tokens: &[Matrix]) -> Result<Matrix, VitError> {
        let mut tape = Tape::new();
        let out = match self {
            Network::Vit(m) => {
                let bound = m.bind(&mut tape);
                m.logits_on_tape(&mut tape, &bound, tokens, None)?
            }
            Network::ConvMixer(m) => {
                let bound = m.bind(&mut tape);
                m.logits_on_tape(&mut tape, &bound, tokens, BnMode::Eval, &mut Vec::new())?
            }
        };
        Ok(tape.value(out)?.clone())
    }

    /// Mean cross-entropy and the fraction of `tokens` whose arg-max logit
    /// equals the label.
    pub fn evaluate(&self, tokens: &[Matrix], labels: &[usize]) -> Result<Evaluation, VitError> {
        if tokens.is_empty() {
            return Ok(Evaluation { loss: 0.0, accuracy: 0.0 });
        }
        let mut correct = 0;
        let mut loss = 0.0;
        for (chunk, lab) in tokens.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
            let logits = self.logits(chunk)?;
            if !logits.is_finite() {
                return Err(AutodiffError::NonFinite { op: "evaluate" }.into());
            }
            for (i, &l) in lab.iter().enumerate() {
                let row = logits.row(i);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                correct += usize::from(arg == l);
                let max = row[arg];
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[l];
            }
        }
        let n = tokens.len() as f64;
        Ok(Evaluation {
            loss: loss / n,
            accuracy: correct as f64 / n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEvent {
    pub epoch: usize,
    pub step: u64,
    pub message: String,
}

/// Mean ln κ of the tokens entering and leaving each self-attention block on
/// the probe batch after `epoch` (0 = initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaTraceRow {
    pub epoch: usize,
    pub layer: usize,
    pub ln_kappa_in: f64,
    pub ln_kappa_out: f64,
    pub ln_kappa_sa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub init_hash: String,
    pub init_val_loss: f64,
    pub init_val_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub divergence: Option<DivergenceEvent>,
    pub kappa_trace: Vec<KappaTraceRow>,
    /// Mean ln κ of the (grayed) input token matrices of the probe batch.
    pub input_ln_kappa: Option<f64>,
    pub normalization: Option<ChannelNorm>,
    pub checkpoint: Option<PathBuf>,
}

/// Trained network plus its report.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub network: Network,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<DatasetHandle, HarnessError> {
    Ok(match &config.dataset {
        DatasetSpec::Synthetic(s) => synth_dataset(s, config.model.image(), RngStream::new(config.seed, DATA_STREAM))?,
        DatasetSpec::Cifar10 { dir, limit } => load_cifar10(dir, *limit)?,
    })
}

/// Loads the configured dataset and trains one run.
pub fn train(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let data = load_dataset(config)?;
    let outcome = train_on(config, &data, "run")?;
    super::report::write_run(config, &outcome.report)?;
    Ok(outcome.report)
}

/// Grayed token matrices and labels of a split. Graying happens here, before
/// patch embedding, identically for every split.
pub fn prepare_tokens(samples: &[Sample], patch: usize, graying: &GrayingConfig) -> Result<(Vec<Matrix>, Vec<usize>), HarnessError> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let tokens = stack_tokens(&images, patch)?;
    let tokens = gray_batch(&tokens, graying).map_err(VitError::from)?;
    Ok((tokens, samples.iter().map(|s| s.label).collect()))
}

fn is_divergence(e: &VitError) -> bool {
    match e {
        VitError::Autodiff(AutodiffError::NonFinite { .. }) => true,
        VitError::Layer { source, .. } => is_divergence(source),
        _ => false,
    }
}

/// Trains `config.model` on `data`. Deterministic in `config.seed`; a
/// non-finite loss ends the run early and is recorded as a divergence event.
pub fn train_on(config: &ExperimentConfig, data: &DatasetHandle, name: &str) -> Result<TrainOutcome, HarnessError> {
    let mut net = Network::init(&config.model, RngStream::new(config.seed, INIT_STREAM))?;
    let init_hash = net.param_hash();
    let (train_x, train_y) = prepare_tokens(&data.train, net.patch(), &config.graying)?;
    let (val_x, val_y) = prepare_tokens(&data.val, net.patch(), &config.graying)?;
    let probe_len = config.probe_size.min(val_x.len());
    let probe = &val_x[..probe_len];

    let shapes: Vec<_> = net.param_values().iter().map(|m| m.shape()).collect();
    let decay = net.decay_flags();
    let mut opt = AdamW::new(config.optimizer.clone(), &shapes);

    let mut kappa_trace = Vec::new();
    let trace = |net: &Network, epoch: usize, out: &mut Vec<KappaTraceRow>| -> Result<(), HarnessError> {
        if let (true, Network::Vit(m)) = (config.trace_condition && probe_len > 0, net) {
            let report = layer_condition_profile(m, probe, Tap::Raw)?;
            out.extend(report.records.iter().map(|r| KappaTraceRow {
                epoch,
                layer: r.layer,
                ln_kappa_in: r.ln_kappa_in,
                ln_kappa_out: r.ln_kappa_out,
                ln_kappa_sa: r.sa_no_skip,
            }));
        }
        Ok(())
    };
    trace(&net, 0, &mut kappa_trace)?;
    let input_ln_kappa = if probe_len > 0 {
        Some(
            probe
                .iter()
                .map(|t| crate::diagnostics::clamped_ln_kappa(t).map(|(v, _)| v))
                .sum::<Result<f64, _>>()?
                / probe_len as f64,
        )
    } else {
        None
    };

    let init = net.evaluate(&val_x, &val_y)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut divergence = None;
    let shuffle = RngStream::new(config.seed, SHUFFLE_STREAM);
    'outer: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        shuffle.substream(epoch as u64).sampler().shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(config.batch_size) {
            let xb: Vec<Matrix> = idx.iter().map(|&i| train_x[i].clone()).collect();
            let yb: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let step = net.loss_and_grads(&xb, &yb);
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => {
                    divergence = Some(DivergenceEvent {
                        epoch,
                        step: opt.steps(),
                        message: e.to_string(),
                    });
                    break 'outer;
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                divergence = Some(DivergenceEvent {
                    epoch,
                    step: opt.steps(),
                    message: format!("non-finite loss or gradient (loss {loss})"),
                });
                break 'outer;
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            opt.step(net.params_mut(), &grads, &decay);
        }
        let val = match net.evaluate(&val_x, &val_y) {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                divergence = Some(DivergenceEvent {
                    epoch,
                    step: opt.steps(),
                    message: e.to_string(),
                });
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let train_loss = loss_sum / seen.max(1) as f64;
        log::info!("{name} epoch {epoch}: loss {train_loss:.4} val loss {:.4} acc {:.3}", val.loss, val.accuracy);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        });
        trace(&net, epoch, &mut kappa_trace)?;
    }

    let final_val_accuracy = epochs.last().map_or(init.accuracy, |e| e.val_accuracy);
    let best_val_accuracy = epochs.iter().map(|e| e.val_accuracy).fold(init.accuracy, f64::max);
    let checkpoint = match &config.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
            let path = dir.join(format!("{name}.ckpt"));
            write_checkpoint(&path, &net.to_checkpoint())?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        report: RunReport {
            name: name.into(),
            seed: config.seed,
            init_hash,
            init_val_loss: init.loss,
            init_val_accuracy: init.accuracy,
            epochs,
            final_val_accuracy,
            best_val_accuracy,
            divergence,
            kappa_trace,
            input_ln_kappa,
            normalization: data.normalization.clone(),
            checkpoint,
        },
        network: net,
    })
}
