//! `skipcond` command line. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use skipcond::diagnostics::{
    self, jacobian_skip_study, layer_condition_profile, BoundTrialStats, DiagError, Tap,
};
use skipcond::graying::{GrayingConfig, GrayingMethod};
use skipcond::harness::{
    self, report, ConfigError, DataError, ExperimentConfig, HarnessError, SynthSpec,
};
use skipcond::linalg::io::{matrix_from_csv, matrix_to_csv};
use skipcond::linalg::{conditioning, RngStream};
use skipcond::vitcore::{read_checkpoint, ConvMixerParams, ModelParams, VitError};

#[derive(Parser, Debug)]
#[command(name = "skipcond", version, about = "Conditioning experiments for self-attention skip connections")]
pub struct Cli {
    /// Base seed; overrides the seed of a loaded config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Svd,
    Dct,
}

impl From<MethodArg> for GrayingMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Svd => GrayingMethod::Svd,
            MethodArg::Dct => GrayingMethod::Dct,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TapArg {
    Raw,
    Normalized,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the randomized bound suites (attention, skip, FFN, depthwise conv).
    Props {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Grid side of the depthwise-convolution suite.
        #[arg(long, default_value_t = 8)]
        conv_size: usize,
        #[arg(long, default_value_t = 8)]
        conv_channels: usize,
    },
    /// Per-layer embedding condition numbers of a ViT checkpoint.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation batch size.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = TapArg::Raw)]
        tap: TapArg,
    },
    /// Train one model from --config.
    Train,
    /// Train the skip-connection ablation arms from --config.
    Ablate,
    /// Train a token-graying sweep from --config.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.7, 0.5])]
        epsilons: Vec<f64>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MethodArg::Svd, MethodArg::Dct])]
        methods: Vec<MethodArg>,
    },
    /// Gray one matrix (CSV input, or a seeded Gaussian one).
    Gray {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Dct)]
        method: MethodArg,
        #[arg(long, default_value_t = 0.95)]
        epsilon: f64,
        #[arg(long, default_value_t = 32)]
        rows: usize,
        #[arg(long, default_value_t = 32)]
        cols: usize,
    },
    /// Self-attention block Jacobian condition with and without the skip.
    Jacobian {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Gray the input tokens with SVD graying at this ε first.
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration: exit 1.
    Validation(String),
    /// Anything that failed while running: exit 2.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Data(DataError::Spec(_)) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DiagError> for CliError {
    fn from(e: DiagError) -> Self {
        match e {
            DiagError::Config(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_out(path: &Path, text: &str) -> Result<(), CliError> {
    report::write_text(path, text).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_rows<T: Serialize>(cli: &Cli, stem: &str, rows: &[T]) -> Result<(), CliError> {
    match cli.format {
        Format::Csv => write_out(&cli.out.join(format!("{stem}.csv")), &report::to_csv(rows).map_err(runtime)?),
        Format::Json => write_out(
            &cli.out.join(format!("{stem}.json")),
            &(serde_json::to_string_pretty(rows).map_err(runtime)? + "\n"),
        ),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("this command needs --config <json>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.output_dir = Some(cli.out.clone());
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Props {
            trials,
            n,
            d,
            conv_size,
            conv_channels,
        } => props(cli, seed, *trials, *n, *d, *conv_size, *conv_channels),
        Command::Profile { checkpoint, samples, tap } => profile(cli, seed, checkpoint, *samples, *tap),
        Command::Train => {
            let cfg = load_config(cli)?;
            let r = harness::train(&cfg)?;
            println!(
                "{}: final val accuracy {:.4} after {} epochs{}",
                r.name,
                r.final_val_accuracy,
                r.epochs.len(),
                r.checkpoint.as_ref().map_or(String::new(), |p| format!(", checkpoint {}", p.display()))
            );
            Ok(())
        }
        Command::Ablate => {
            let cfg = load_config(cli)?;
            let r = harness::run_skip_ablation(&cfg)?;
            for a in &r.arms {
                match (&a.report, &a.error) {
                    (Some(rep), _) => println!("{}: final val accuracy {:.4}", a.name, rep.final_val_accuracy),
                    (None, Some(e)) => println!("{}: failed: {e}", a.name),
                    _ => {}
                }
            }
            Ok(())
        }
        Command::Sweep { epsilons, methods } => {
            let cfg = load_config(cli)?;
            let methods: Vec<GrayingMethod> = methods.iter().map(|&m| m.into()).collect();
            let r = harness::run_tg_sweep(&cfg, epsilons, &methods)?;
            for row in &r.rows {
                println!(
                    "{:?} eps {}: input ln k {:?}, val accuracy {:?}",
                    row.method, row.epsilon, row.input_ln_kappa, row.final_val_accuracy
                );
            }
            Ok(())
        }
        Command::Gray {
            input,
            method,
            epsilon,
            rows,
            cols,
        } => gray(cli, seed, input.as_deref(), *method, *epsilon, *rows, *cols),
        Command::Jacobian {
            n,
            d,
            heads,
            seeds,
            epsilon,
        } => {
            let g = epsilon.map(GrayingConfig::svd);
            if let Some(g) = &g {
                g.validate().map_err(|e| CliError::Validation(e.to_string()))?;
            }
            let rows = jacobian_skip_study(*n, *d, *heads, *seeds, &RngStream::new(seed, 0), g.as_ref())?;
            let wins = rows
                .chunks(2)
                .filter(|p| p[0].ln_kappa < p[1].ln_kappa)
                .count();
            println!("skip has the smaller Jacobian ln kappa in {wins}/{seeds} seeds");
            write_rows(cli, "jacobian", &rows)
        }
    }
}

#[derive(Serialize)]
struct SuiteSummary<'a> {
    suite: &'a str,
    n: usize,
    d: usize,
    trials: usize,
    redrawn: usize,
    excluded: usize,
    fraction_satisfied: f64,
    median_ratio: f64,
    median_ln_ratio: f64,
    c_min: f64,
    c_median: f64,
    c_max: f64,
}

#[derive(Serialize)]
struct PropsSummary<'a> {
    seed: u64,
    trials: usize,
    suites: Vec<SuiteSummary<'a>>,
    gaussian_fraction_sigma_max_above_one: f64,
    gaussian_fraction_sigma_min_below_one: f64,
}

fn props(cli: &Cli, seed: u64, trials: usize, n: usize, d: usize, size: usize, channels: usize) -> Result<(), CliError> {
    let root = RngStream::new(seed, 0);
    let suites: Vec<(&str, BoundTrialStats)> = vec![
        ("prop1", diagnostics::verify_prop1(n, d, trials, &root.substream(1))?),
        ("prop2", diagnostics::verify_prop2(n, d, trials, &root.substream(2), true)?),
        ("prop2_raw", diagnostics::verify_prop2(n, d, trials, &root.substream(3), false)?),
        ("ffn", diagnostics::verify_ffn_bound(n, d, trials, &root.substream(4))?),
        ("convmixer", diagnostics::verify_convmixer_bound(channels, size, trials, &root.substream(5))?),
    ];
    for (name, stats) in &suites {
        let path = match cli.format {
            Format::Csv => cli.out.join(format!("{name}.csv")),
            Format::Json => cli.out.join(format!("{name}.json")),
        };
        let text = match cli.format {
            Format::Csv => stats.to_csv()?,
            Format::Json => serde_json::to_string_pretty(stats).map_err(runtime)? + "\n",
        };
        write_out(&path, &text)?;
        println!(
            "{name}: satisfied {:.4}, median ln ratio {:.3}",
            stats.fraction_satisfied, stats.median_ln_ratio
        );
    }
    let (above, below) = diagnostics::gaussian_extreme_fractions(n, d, trials, &root.substream(6))?;
    let summary = PropsSummary {
        seed,
        trials,
        suites: suites
            .iter()
            .map(|(name, s)| SuiteSummary {
                suite: name,
                n: s.n,
                d: s.d,
                trials: s.trials,
                redrawn: s.redrawn,
                excluded: s.excluded,
                fraction_satisfied: s.fraction_satisfied,
                median_ratio: s.median_ratio,
                median_ln_ratio: s.median_ln_ratio,
                c_min: s.c_min,
                c_median: s.c_median,
                c_max: s.c_max,
            })
            .collect(),
        gaussian_fraction_sigma_max_above_one: above,
        gaussian_fraction_sigma_min_below_one: below,
    };
    write_out(
        &cli.out.join("props_summary.json"),
        &(serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n"),
    )
}

fn profile(cli: &Cli, seed: u64, checkpoint: &Path, samples: usize, tap: TapArg) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::Validation("--samples must be positive".into()));
    }
    let ck = read_checkpoint(checkpoint).map_err(|e| CliError::Validation(format!("{}: {e}", checkpoint.display())))?;
    if ck.manifest.kind != "vit" {
        // Only attention models have the four embeddings.
        ConvMixerParams::from_checkpoint(&ck)?;
        return Err(CliError::Validation(format!(
            "{}: profile needs a ViT checkpoint, got {}",
            checkpoint.display(),
            ck.manifest.kind
        )));
    }
    let model = ModelParams::from_checkpoint(&ck)?;
    let (samples_v, graying) = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            if cfg.model.image() != model.spec.image {
                return Err(CliError::Validation("config image shape differs from the checkpoint".into()));
            }
            let data = harness::load_dataset(&cfg)?;
            (data.val, cfg.graying)
        }
        None => {
            let spec = SynthSpec {
                classes: model.spec.classes,
                train_per_class: 1,
                val_per_class: samples.div_ceil(model.spec.classes),
                noise: 1.0,
            };
            let data = harness::synth_dataset(&spec, model.spec.image, RngStream::new(seed, 2))
                .map_err(HarnessError::from)?;
            (data.val, GrayingConfig::none())
        }
    };
    let take = samples.min(samples_v.len());
    let (tokens, _) = harness::prepare_tokens(&samples_v[..take], model.spec.patch, &graying)?;
    let tap = match tap {
        TapArg::Raw => Tap::Raw,
        TapArg::Normalized => Tap::Normalized,
    };
    let r = layer_condition_profile(&model, &tokens, tap)?;
    for rec in &r.records {
        println!(
            "layer {}: SA {:.3} / SA+skip {:.3} / MLP {:.3} / MLP+skip {:.3}",
            rec.layer, rec.sa_no_skip, rec.sa_skip, rec.mlp_no_skip, rec.mlp_skip
        );
    }
    write_rows(cli, "profile", &r.records)
}

#[derive(Serialize)]
struct GraySummary {
    method: GrayingMethod,
    epsilon: f64,
    rows: usize,
    cols: usize,
    ln_kappa_before: Option<f64>,
    ln_kappa_after: Option<f64>,
}

fn gray(cli: &Cli, seed: u64, input: Option<&Path>, method: MethodArg, epsilon: f64, rows: usize, cols: usize) -> Result<(), CliError> {
    let x = match input {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            matrix_from_csv(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => {
            if rows == 0 || cols == 0 {
                return Err(CliError::Validation("--rows and --cols must be positive".into()));
            }
            RngStream::new(seed, 0).gaussian(rows, cols)
        }
    };
    let cfg = match method {
        MethodArg::Svd => GrayingConfig::svd(epsilon),
        MethodArg::Dct => GrayingConfig::dct(epsilon),
    };
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let y = cfg.apply(&x).map_err(runtime)?;
    let lk = |m| conditioning(m).map(|c| c.ln_kappa()).map_err(runtime);
    let summary = GraySummary {
        method: method.into(),
        epsilon,
        rows: x.rows(),
        cols: x.cols(),
        ln_kappa_before: lk(&x)?,
        ln_kappa_after: lk(&y)?,
    };
    println!(
        "ln kappa {:?} -> {:?}",
        summary.ln_kappa_before, summary.ln_kappa_after
    );
    match cli.format {
        Format::Csv => write_out(&cli.out.join("grayed.csv"), &matrix_to_csv(&y))?,
        Format::Json => write_out(
            &cli.out.join("grayed.json"),
            &(serde_json::to_string(&(0..y.rows()).map(|i| y.row(i).to_vec()).collect::<Vec<_>>()).map_err(runtime)? + "\n"),
        )?,
    }
    write_out(
        &cli.out.join("gray_summary.json"),
        &(serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n"),
    )
}
