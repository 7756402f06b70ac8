use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render_config;
use crate::oracle::Report;
use crate::twin::TwinConfig;
use crate::{Error, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const DESIGN_JSON: &str = "design.json";
pub const CONFIG_ECHO: &str = "config.txt";

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub method: String,
    pub seed: u64,
    pub rmse: f64,
    pub mean_posterior_std: f64,
    pub drilled_column: usize,
    pub final_loss: f64,
}

#[derive(Serialize)]
struct DesignFile<'a> {
    method: &'a str,
    seed: u64,
    config_digest: &'a str,
    density: &'a [f64],
    drilled: &'a [usize],
}

fn rows_of(report: &Report) -> impl Iterator<Item = MetricsRow> + '_ {
    report.rows.iter().map(|m| MetricsRow {
        iteration: m.k,
        method: report.method.clone(),
        seed: report.seed,
        rmse: m.rmse,
        mean_posterior_std: m.mean_posterior_std,
        drilled_column: m.drilled_column,
        final_loss: m.final_train_loss,
    })
}

fn write_rows<'a>(reports: impl IntoIterator<Item = &'a Report>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for row in rows_of(r) {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `design.json` and the config echo into `dir`.
pub fn emit_report(report: &Report, cfg: &TwinConfig, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::InvalidParameter("report has no iterations".into()));
    }
    std::fs::create_dir_all(dir)?;
    write_rows([report], &dir.join(METRICS_CSV))?;
    let design = DesignFile {
        method: &report.method,
        seed: report.seed,
        config_digest: &report.config_digest,
        density: &report.density,
        drilled: &report.drilled,
    };
    std::fs::write(
        dir.join(DESIGN_JSON),
        serde_json::to_string_pretty(&design)? + "\n",
    )?;
    std::fs::write(dir.join(CONFIG_ECHO), render_config(cfg))?;
    Ok(())
}

/// All rows of several reports in one CSV with the `metrics.csv` header.
pub fn write_compare_csv(reports: &[Report], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_rows(reports, path)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
