use serde::{Deserialize, Serialize};

use crate::graying::{GrayingConfig, GrayingMethod};
use crate::vitcore::BlockConfig;

use super::config::{ExperimentConfig, ModelConfig};
use super::data::DatasetHandle;
use super::train::{load_dataset, train_on, RunReport, TrainOutcome};
use super::HarnessError;

/// One arm of an experiment: its configuration and either the trained run or
/// the error that stopped it.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub name: String,
    pub config: ExperimentConfig,
    pub outcome: Result<TrainOutcome, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

impl From<&ArmRun> for ArmSummary {
    fn from(a: &ArmRun) -> Self {
        match &a.outcome {
            Ok(o) => Self {
                name: a.name.clone(),
                report: Some(o.report.clone()),
                error: None,
            },
            Err(e) => Self {
                name: a.name.clone(),
                report: None,
                error: Some(e.clone()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub arms: Vec<ArmSummary>,
    /// Every successful arm started from the same parameter hash.
    pub shared_init: bool,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&RunReport> {
        self.arms.iter().find(|a| a.name == name).and_then(|a| a.report.as_ref())
    }

    /// Final validation accuracy of an arm.
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.arm(name).map(|r| r.final_val_accuracy)
    }
}

/// Arm names and configurations. ViT: `full`, `no_ffn_skip`, `no_sab_skip`
/// (pre-norm kept as in the base); ConvMixer: `skip`, `no_skip`.
pub fn ablation_arms(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    match &base.model {
        ModelConfig::Vit(spec) => {
            let arm = |name: &str, skip_sab: bool, skip_ffn: bool| {
                let mut cfg = base.clone();
                let mut s = spec.clone();
                s.block = BlockConfig {
                    skip_sab,
                    skip_ffn,
                    prenorm: spec.block.prenorm,
                };
                cfg.model = ModelConfig::Vit(s);
                (name.to_string(), cfg)
            };
            vec![arm("full", true, true), arm("no_ffn_skip", true, false), arm("no_sab_skip", false, true)]
        }
        ModelConfig::ConvMixer(spec) => [("skip", true), ("no_skip", false)]
            .into_iter()
            .map(|(name, skip)| {
                let mut cfg = base.clone();
                let mut s = spec.clone();
                s.skip = skip;
                cfg.model = ModelConfig::ConvMixer(s);
                (name.to_string(), cfg)
            })
            .collect(),
    }
}

fn run_arms(arms: Vec<(String, ExperimentConfig)>, data: &DatasetHandle) -> Vec<ArmRun> {
    arms.into_iter()
        .map(|(name, config)| {
            let outcome = train_on(&config, data, &name).map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("arm {name} failed: {e}");
            }
            ArmRun { name, config, outcome }
        })
        .collect()
}

/// Trains every ablation arm on `data` with the base seed. A failing arm is
/// recorded and does not stop the others.
pub fn run_skip_ablation_on(base: &ExperimentConfig, data: &DatasetHandle) -> Vec<ArmRun> {
    run_arms(ablation_arms(base), data)
}

pub fn summarize_ablation(seed: u64, runs: &[ArmRun]) -> AblationReport {
    let hashes: Vec<&str> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.report.init_hash.as_str()))
        .collect();
    AblationReport {
        seed,
        arms: runs.iter().map(ArmSummary::from).collect(),
        shared_init: hashes.windows(2).all(|w| w[0] == w[1]),
    }
}

pub fn run_skip_ablation(base: &ExperimentConfig) -> Result<AblationReport, HarnessError> {
    base.validate()?;
    let data = load_dataset(base)?;
    let runs = run_skip_ablation_on(base, &data);
    let report = summarize_ablation(base.seed, &runs);
    super::report::write_ablation(base, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: GrayingMethod,
    pub epsilon: f64,
    /// Batch-mean `ln κ` of the grayed input token matrices on the probe set.
    pub input_ln_kappa: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    /// Final-epoch `ln κ_in` / `ln κ_out` around each self-attention block,
    /// averaged over layers.
    pub mean_ln_kappa_in: Option<f64>,
    pub mean_ln_kappa_out: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub arms: Vec<ArmSummary>,
}

/// Arms of a graying sweep: the ungrayed baseline, then every `method × ε`.
pub fn sweep_arms(base: &ExperimentConfig, methods: &[GrayingMethod], epsilons: &[f64]) -> Vec<(String, ExperimentConfig)> {
    let mut arms = Vec::new();
    let mut push = |name: String, graying: GrayingConfig| {
        let mut cfg = base.clone();
        cfg.graying = graying;
        cfg.trace_condition = true;
        arms.push((name, cfg));
    };
    push("baseline".into(), GrayingConfig::none());
    for &m in methods.iter().filter(|&&m| m != GrayingMethod::None) {
        for &e in epsilons {
            let g = match m {
                GrayingMethod::Svd => GrayingConfig::svd(e),
                _ => GrayingConfig::dct(e),
            };
            push(format!("{}_{e}", method_name(m)), g);
        }
    }
    arms
}

fn method_name(m: GrayingMethod) -> &'static str {
    match m {
        GrayingMethod::None => "none",
        GrayingMethod::Svd => "svd",
        GrayingMethod::Dct => "dct",
    }
}

fn final_epoch_means(r: &RunReport) -> (Option<f64>, Option<f64>) {
    let last = r.kappa_trace.iter().map(|t| t.epoch).max();
    let rows: Vec<_> = r.kappa_trace.iter().filter(|t| Some(t.epoch) == last).collect();
    if rows.is_empty() {
        return (None, None);
    }
    let n = rows.len() as f64;
    (
        Some(rows.iter().map(|t| t.ln_kappa_in).sum::<f64>() / n),
        Some(rows.iter().map(|t| t.ln_kappa_out).sum::<f64>() / n),
    )
}

pub fn run_tg_sweep_on(base: &ExperimentConfig, data: &DatasetHandle, methods: &[GrayingMethod], epsilons: &[f64]) -> Result<SweepReport, HarnessError> {
    let arms = sweep_arms(base, methods, epsilons);
    for (_, cfg) in &arms {
        cfg.validate()?;
    }
    let runs = run_arms(arms, data);
    let rows = runs
        .iter()
        .map(|a| {
            let g = a.config.graying;
            match &a.outcome {
                Ok(o) => {
                    let (kin, kout) = final_epoch_means(&o.report);
                    SweepRow {
                        method: g.method,
                        epsilon: g.epsilon,
                        input_ln_kappa: o.report.input_ln_kappa,
                        final_val_accuracy: Some(o.report.final_val_accuracy),
                        mean_ln_kappa_in: kin,
                        mean_ln_kappa_out: kout,
                        error: None,
                    }
                }
                Err(e) => SweepRow {
                    method: g.method,
                    epsilon: g.epsilon,
                    input_ln_kappa: None,
                    final_val_accuracy: None,
                    mean_ln_kappa_in: None,
                    mean_ln_kappa_out: None,
                    error: Some(e.clone()),
                },
            }
        })
        .collect();
    Ok(SweepReport {
        seed: base.seed,
        rows,
        arms: runs.iter().map(ArmSummary::from).collect(),
    })
}

pub fn run_tg_sweep(base: &ExperimentConfig, epsilons: &[f64], methods: &[GrayingMethod]) -> Result<SweepReport, HarnessError> {
    base.validate()?;
    let data = load_dataset(base)?;
    let report = run_tg_sweep_on(base, &data, methods, epsilons)?;
    super::report::write_sweep(base, &report)?;
    Ok(report)
}
