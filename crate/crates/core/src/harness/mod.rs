//! Configuration, datasets, the training loop, the skip-ablation and
//! graying-sweep experiments, and report files.

mod config;
mod data;
mod experiments;
mod optim;
pub mod report;
mod train;

use thiserror::Error;

use crate::diagnostics::DiagError;
use crate::linalg::LinalgError;
use crate::vitcore::VitError;

pub use config::{ConfigError, DatasetSpec, ExperimentConfig, ModelConfig};
pub use data::{
    cifar10_files, load_cifar10, nearest_mean_accuracy, parse_cifar10, synth_dataset, ChannelNorm,
    DataError, DatasetHandle, DatasetSource, Sample, SynthSpec, CIFAR_RECORD_LEN, CIFAR_SHAPE,
};
pub use experiments::{
    ablation_arms, run_skip_ablation, run_skip_ablation_on, run_tg_sweep, run_tg_sweep_on,
    summarize_ablation, sweep_arms, AblationReport, ArmRun, ArmSummary, SweepReport, SweepRow,
};
pub use optim::{AdamW, OptimizerKind, OptimizerSpec};
pub use train::{
    load_dataset, prepare_tokens, train, train_on, DivergenceEvent, EpochRecord, Evaluation, KappaTraceRow, Network, RunReport,
    TrainOutcome,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] VitError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error("{0}")]
    Io(String),
}

impl From<LinalgError> for HarnessError {
    fn from(e: LinalgError) -> Self {
        HarnessError::Model(e.into())
    }
}
