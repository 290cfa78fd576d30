//! Run summaries and the multi-run energy/loss comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::EnergyTrace;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("missing input: {0}")]
    Missing(PathBuf),
    #[error("{file}: {msg}")]
    Parse { file: PathBuf, msg: String },
    #[error("I/O: {0}")]
    Io(String),
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub test_acc: f64,
    pub best_epoch: usize,
    pub variant: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Per-epoch numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEpoch {
    pub energy_mean: f64,
    /// Largest `|H(t) - H(t_0)|` over the layers of the epoch.
    pub energy_drift: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub variant: String,
    pub epochs: BTreeMap<usize, RunEpoch>,
}

pub const MERGED_HEADER: &str = "variant,epoch,runs,energy_mean,energy_std,energy_drift,train_loss_mean,train_loss_std,val_loss_mean,val_loss_std";

fn read(path: &Path) -> Result<String, ReportError> {
    if !path.is_file() {
        return Err(ReportError::Missing(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| ReportError::Io(format!("{}: {e}", path.display())))
}

/// Per-epoch `(mean H, max drift)` over all layers.
pub fn energy_by_epoch(trace: &EnergyTrace) -> BTreeMap<usize, (f64, f64)> {
    let mut sums: BTreeMap<usize, (f64, usize, f64)> = BTreeMap::new();
    let mut start: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in &trace.records {
        let h0 = *start.entry((r.epoch, r.layer)).or_insert(r.h);
        let e = sums.entry(r.epoch).or_insert((0.0, 0, 0.0));
        e.0 += r.h;
        e.1 += 1;
        e.2 = e.2.max((r.h - h0).abs());
    }
    sums.into_iter().map(|(ep, (s, c, d))| (ep, (s / c as f64, d))).collect()
}

/// Reads `energy.csv`, `report.csv` and, when present, the variant from
/// `summary.json` (otherwise the directory name).
pub fn load_run(dir: &Path) -> Result<RunData, ReportError> {
    let energy_path = dir.join("energy.csv");
    let report_path = dir.join("report.csv");
    let energy_text = read(&energy_path)?;
    let report_text = read(&report_path)?;
    let trace = EnergyTrace::from_csv(&energy_text).map_err(|e| ReportError::Parse {
        file: energy_path.clone(),
        msg: e.to_string(),
    })?;
    let summary_path = dir.join("summary.json");
    let variant = if summary_path.is_file() {
        let s: RunSummary = serde_json::from_str(&read(&summary_path)?).map_err(|e| ReportError::Parse {
            file: summary_path.clone(),
            msg: e.to_string(),
        })?;
        s.variant
    } else {
        dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned())
    };

    let parse_err = |msg: String| ReportError::Parse {
        file: report_path.clone(),
        msg,
    };
    let mut rdr = csv::Reader::from_reader(report_text.as_bytes());
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(format!("missing column {name}")))
    };
    let (ce, ct, cv) = (col("epoch")?, col("train_loss")?, col("val_loss")?);
    let energy = energy_by_epoch(&trace);
    let mut epochs = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let field = |i: usize| -> Result<f64, ReportError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err(format!("line {}: bad number", line + 2)))
        };
        let epoch = field(ce)? as usize;
        let (energy_mean, energy_drift) = energy.get(&epoch).copied().unwrap_or((f64::NAN, f64::NAN));
        epochs.insert(
            epoch,
            RunEpoch {
                energy_mean,
                energy_drift,
                train_loss: field(ct)?,
                val_loss: field(cv)?,
            },
        );
    }
    Ok(RunData { variant, epochs })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per variant and epoch, aggregated over the runs that reached
/// that epoch. Drift is the mean across runs of each run's drift.
pub fn merge_runs(runs: &[RunData]) -> String {
    let mut by_variant: BTreeMap<&str, Vec<&RunData>> = BTreeMap::new();
    for r in runs {
        by_variant.entry(&r.variant).or_default().push(r);
    }
    let mut out = String::from(MERGED_HEADER);
    out.push('\n');
    for (variant, group) in by_variant {
        let all_epochs: std::collections::BTreeSet<usize> =
            group.iter().flat_map(|r| r.epochs.keys().copied()).collect();
        for epoch in all_epochs {
            let rows: Vec<&RunEpoch> = group.iter().filter_map(|r| r.epochs.get(&epoch)).collect();
            let pick = |f: fn(&RunEpoch) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (em, es) = mean_std(&pick(|r| r.energy_mean));
            let (dm, _) = mean_std(&pick(|r| r.energy_drift));
            let (tm, ts) = mean_std(&pick(|r| r.train_loss));
            let (vm, vs) = mean_std(&pick(|r| r.val_loss));
            let _ = writeln!(out, "{variant},{epoch},{},{em},{es},{dm},{tm},{ts},{vm},{vs}", rows.len());
        }
    }
    out
}
