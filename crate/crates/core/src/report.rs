//! Per-epoch records, "top (average)" summaries and their CSV files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RocPoint;

/// One row of `report.csv`. Test-set metrics except `val_acc`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Which epoch the "top" figures come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    /// Best test value of each metric over all epochs.
    #[default]
    PerEpochTest,
    /// Test metrics of the epoch with the best validation accuracy.
    ValSelected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub top_acc: f64,
    pub avg_acc: f64,
    pub top_recall: f64,
    pub avg_recall: f64,
    pub top_f1: f64,
    pub avg_f1: f64,
    pub top_auc: f64,
    pub avg_auc: f64,
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl Summary {
    pub fn from_records(records: &[EpochRecord], mode: ReportMode) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("cannot summarize an empty run".into()));
        }
        let n = records.len() as f64;
        let avg = |f: fn(&EpochRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let top = |f: fn(&EpochRecord) -> f64| match mode {
            ReportMode::PerEpochTest => records.iter().map(f).fold(f64::NEG_INFINITY, f64::max),
            ReportMode::ValSelected => f(&records[first_argmax(records.iter().map(|r| r.val_acc))]),
        };
        Ok(Summary {
            top_acc: top(|r| r.test_acc),
            avg_acc: avg(|r| r.test_acc),
            top_recall: top(|r| r.recall),
            avg_recall: avg(|r| r.recall),
            top_f1: top(|r| r.f1),
            avg_f1: avg(|r| r.f1),
            top_auc: top(|r| r.auc),
            avg_auc: avg(|r| r.auc),
        })
    }
}

/// The epoch whose ROC curve is reported: best test accuracy, or best
/// validation accuracy in [`ReportMode::ValSelected`]; earliest on ties.
pub fn best_epoch_index(records: &[EpochRecord], mode: ReportMode) -> usize {
    match mode {
        ReportMode::PerEpochTest => first_argmax(records.iter().map(|r| r.test_acc)),
        ReportMode::ValSelected => first_argmax(records.iter().map(|r| r.val_acc)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub records: Vec<EpochRecord>,
    pub summary: Summary,
    /// 1-based epoch the ROC curve belongs to.
    pub best_epoch: usize,
    pub roc: Vec<RocPoint>,
    /// How many times Gradient SHAP ran.
    pub shap_invocations: usize,
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub summary: Summary,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    for row in rows {
        w.serialize(row).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    write_csv(path, records)
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    write_csv(path, roc)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    #[derive(Serialize)]
    struct Flat {
        lambda: f64,
        top_acc: f64,
        avg_acc: f64,
        top_recall: f64,
        avg_recall: f64,
        top_f1: f64,
        avg_f1: f64,
        top_auc: f64,
        avg_auc: f64,
    }
    let flat: Vec<Flat> = rows
        .iter()
        .map(|r| Flat {
            lambda: r.lambda,
            top_acc: r.summary.top_acc,
            avg_acc: r.summary.avg_acc,
            top_recall: r.summary.top_recall,
            avg_recall: r.summary.avg_recall,
            top_f1: r.summary.top_f1,
            avg_f1: r.summary.avg_f1,
            top_auc: r.summary.top_auc,
            avg_auc: r.summary.avg_auc,
        })
        .collect();
    write_csv(path, &flat)
}
