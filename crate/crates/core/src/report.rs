//! Run metric records and the consolidated ablation report: per-run JSON
//! records, mean-and-spread aggregation across seeds, and text tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One evaluation result, written next to the run artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Row or phase label, e.g. "st" or "full".
    pub label: String,
    /// Hash of the dataset generation config; reports refuse to mix tasks.
    pub task_hash: String,
    pub seed: u64,
    pub miou: f64,
    /// Per-class IoU over the target classes; absent classes are None.
    pub per_class: Vec<Option<f64>>,
    /// Auxiliary scalars (per-bundle mIoUs, timings, ...).
    pub extra: BTreeMap<String, f64>,
}

pub fn write_record(dir: &Path, record: &MetricRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(record).unwrap(),
    )?;
    Ok(())
}

pub fn read_record(dir: &Path) -> Result<MetricRecord> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("bad metric record: {e}")))
}

/// A label's aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub mious: Vec<f64>,
    pub mean: f64,
    /// Half the min-to-max range; 0 for a single seed.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedReport {
    pub task_hash: String,
    pub rows: Vec<RowSummary>,
}

/// Groups records by label (keeping first-appearance order) and aggregates
/// across seeds. All records must come from the same task.
pub fn consolidate(records: &[MetricRecord]) -> Result<ConsolidatedReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("no metric records to consolidate".into()))?;
    let mut rows: Vec<RowSummary> = Vec::new();
    for record in records {
        if record.task_hash != first.task_hash {
            return Err(Error::Data(format!(
                "record {} comes from task {}, report is for task {}",
                record.label, record.task_hash, first.task_hash
            )));
        }
        match rows.iter_mut().find(|r| r.label == record.label) {
            Some(row) => {
                row.seeds.push(record.seed);
                row.mious.push(record.miou);
            }
            None => rows.push(RowSummary {
                label: record.label.clone(),
                seeds: vec![record.seed],
                mious: vec![record.miou],
                mean: 0.0,
                spread: 0.0,
            }),
        }
    }
    for row in &mut rows {
        row.mean = row.mious.iter().sum::<f64>() / row.mious.len() as f64;
        let max = row.mious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = row.mious.iter().cloned().fold(f64::INFINITY, f64::min);
        row.spread = (max - min) / 2.0;
    }
    Ok(ConsolidatedReport {
        task_hash: first.task_hash.clone(),
        rows,
    })
}

impl ConsolidatedReport {
    pub fn render_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "task {}", self.task_hash).unwrap();
        writeln!(out, "{:<18} {:>5} {:>10} {:>9}", "row", "seeds", "mean_miou", "spread").unwrap();
        for row in &self.rows {
            writeln!(
                out,
                "{:<18} {:>5} {:>10.4} {:>9.4}",
                row.label,
                row.seeds.len(),
                row.mean,
                row.spread
            )
            .unwrap();
        }
        out
    }
}
