//! Report files. Every writer is a no-op when the config has no output
//! directory; contents depend only on the config and the run.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiments::{AblationReport, ArmSummary, SweepReport};
use super::train::RunReport;
use super::HarnessError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_text(path, &(text + "\n"))
}

/// Serializes `rows` as CSV with a header from the first row's field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Io(format!("csv: {e}")))
}

#[derive(Serialize)]
struct CurveRow<'a> {
    arm: &'a str,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_accuracy: f64,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    arm: &'a str,
    epoch: usize,
    layer: usize,
    ln_kappa_in: f64,
    ln_kappa_out: f64,
    ln_kappa_sa: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    arm: &'a str,
    init_val_accuracy: Option<f64>,
    final_val_accuracy: Option<f64>,
    best_val_accuracy: Option<f64>,
    diverged_epoch: Option<usize>,
    error: Option<&'a str>,
}

fn curves<'a>(arm: &'a str, r: &'a RunReport) -> impl Iterator<Item = CurveRow<'a>> {
    r.epochs.iter().map(move |e| CurveRow {
        arm,
        epoch: e.epoch,
        train_loss: e.train_loss,
        val_loss: e.val_loss,
        val_accuracy: e.val_accuracy,
    })
}

fn traces<'a>(arm: &'a str, r: &'a RunReport) -> impl Iterator<Item = TraceRow<'a>> {
    r.kappa_trace.iter().map(move |t| TraceRow {
        arm,
        epoch: t.epoch,
        layer: t.layer,
        ln_kappa_in: t.ln_kappa_in,
        ln_kappa_out: t.ln_kappa_out,
        ln_kappa_sa: t.ln_kappa_sa,
    })
}

fn summary(a: &ArmSummary) -> SummaryRow<'_> {
    let r = a.report.as_ref();
    SummaryRow {
        arm: &a.name,
        init_val_accuracy: r.map(|r| r.init_val_accuracy),
        final_val_accuracy: r.map(|r| r.final_val_accuracy),
        best_val_accuracy: r.map(|r| r.best_val_accuracy),
        diverged_epoch: r.and_then(|r| r.divergence.as_ref().map(|d| d.epoch)),
        error: a.error.as_deref(),
    }
}

/// `run.json`, `config.json`, `epochs.csv` and, when traced, `kappa_trace.csv`.
pub fn write_run(config: &ExperimentConfig, report: &RunReport) -> Result<Vec<PathBuf>, HarnessError> {
    let Some(dir) = &config.output_dir else {
        return Ok(Vec::new());
    };
    let mut written = vec![dir.join("run.json"), dir.join("config.json"), dir.join("epochs.csv")];
    write_json(&written[0], report)?;
    write_text(&written[1], &(config.to_json() + "\n"))?;
    write_text(&written[2], &to_csv(&curves(&report.name, report).collect::<Vec<_>>())?)?;
    if !report.kappa_trace.is_empty() {
        let p = dir.join("kappa_trace.csv");
        write_text(&p, &to_csv(&traces(&report.name, report).collect::<Vec<_>>())?)?;
        written.push(p);
    }
    Ok(written)
}

fn arm_tables(arms: &[ArmSummary]) -> Result<(String, String, String), HarnessError> {
    let mut c = Vec::new();
    let mut t = Vec::new();
    for a in arms {
        if let Some(r) = &a.report {
            c.extend(curves(&a.name, r));
            t.extend(traces(&a.name, r));
        }
    }
    let s: Vec<_> = arms.iter().map(summary).collect();
    Ok((to_csv(&c)?, to_csv(&t)?, to_csv(&s)?))
}

/// `ablation.json`, `ablation_curves.csv`, `ablation_summary.csv`.
pub fn write_ablation(config: &ExperimentConfig, report: &AblationReport) -> Result<Vec<PathBuf>, HarnessError> {
    let Some(dir) = &config.output_dir else {
        return Ok(Vec::new());
    };
    let (curves, _, summary) = arm_tables(&report.arms)?;
    let paths = [dir.join("ablation.json"), dir.join("ablation_curves.csv"), dir.join("ablation_summary.csv")];
    write_json(&paths[0], report)?;
    write_text(&paths[1], &curves)?;
    write_text(&paths[2], &summary)?;
    Ok(paths.to_vec())
}

/// `sweep.json`, `sweep.csv`, `sweep_curves.csv`, `sweep_kappa_trace.csv`.
pub fn write_sweep(config: &ExperimentConfig, report: &SweepReport) -> Result<Vec<PathBuf>, HarnessError> {
    let Some(dir) = &config.output_dir else {
        return Ok(Vec::new());
    };
    let (curves, trace, _) = arm_tables(&report.arms)?;
    let paths = [
        dir.join("sweep.json"),
        dir.join("sweep.csv"),
        dir.join("sweep_curves.csv"),
        dir.join("sweep_kappa_trace.csv"),
    ];
    write_json(&paths[0], report)?;
    write_text(&paths[1], &to_csv(&report.rows)?)?;
    write_text(&paths[2], &curves)?;
    write_text(&paths[3], &trace)?;
    Ok(paths.to_vec())
}
