//! Result rows, the fixed-schema CSV, the run manifest, and plot-data files.
//!
//! `results.csv` holds no timestamps and is written from sorted rows, so a
//! rerun with the same config reproduces it byte for byte; wall-clock data
//! lives only in `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "suite,cell,mp,ft,ratio,alpha,shots,asr_shots,minutes,method,seed,metric,value,aggregate";

/// One measurement. `seed: None` marks aggregate rows (means over seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub suite: String,
    pub cell: String,
    pub mp: Option<bool>,
    pub ft: Option<String>,
    pub ratio: Option<f64>,
    pub alpha: Option<f64>,
    pub shots: Option<usize>,
    pub asr_shots: Option<usize>,
    pub minutes: Option<f64>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
    pub aggregate: bool,
}

impl ResultRow {
    pub fn sort_key(&self) -> (String, String, bool, u64) {
        (
            self.cell.clone(),
            self.metric.clone(),
            self.aggregate,
            self.seed.unwrap_or(u64::MAX),
        )
    }

    fn csv_line(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.suite,
            self.cell,
            opt(&self.mp),
            opt(&self.ft),
            opt(&self.ratio),
            opt(&self.alpha),
            opt(&self.shots),
            opt(&self.asr_shots),
            opt(&self.minutes),
            opt(&self.method),
            opt(&self.seed),
            self.metric,
            self.value,
            self.aggregate
        )
    }
}

/// Group per-seed rows by (cell, metric) and append mean/std/count
/// aggregate rows.
pub fn append_aggregates(rows: &mut Vec<ResultRow>) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if !r.aggregate {
            groups.entry((r.cell.clone(), r.metric.clone())).or_default().push(i);
        }
    }
    let mut extra = Vec::new();
    for ((_, metric), idxs) in groups {
        let template = rows[idxs[0]].clone();
        let values: Vec<f64> = idxs.iter().map(|&i| rows[i].value).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mk = |metric: String, value: f64| ResultRow {
            seed: None,
            aggregate: true,
            metric,
            value,
            ..template.clone()
        };
        extra.push(mk(format!("{metric}_mean"), mean));
        extra.push(mk(format!("{metric}_std"), var.sqrt()));
        extra.push(mk("seed_count".into(), n));
    }
    // seed_count appears once per (cell, metric) group; collapse duplicates
    extra.dedup_by(|a, b| {
        a.cell == b.cell && a.metric == b.metric && a.value == b.value && a.metric == "seed_count"
    });
    rows.extend(extra);
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut out = String::with_capacity(64 * rows.len());
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Outcome of one suite-level trend assertion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellStatus {
    pub cell: String,
    pub seed: u64,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format_version: u32,
    pub suite: String,
    pub config_hash: String,
    pub world_seed: u64,
    pub seeds: Vec<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub cells: Vec<CellStatus>,
    pub checks: Vec<TrendCheck>,
    pub config: ExperimentConfig,
}

pub fn write_manifest(path: &Path, manifest: &SuiteManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Two-column gnuplot-compatible curve file (one per fig3 method/shots).
pub fn write_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("# minutes mean_per\n");
    for (x, y) in points {
        out.push_str(&format!("{x} {y}\n"));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cell: &str, seed: u64, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            suite: "t".into(),
            cell: cell.into(),
            mp: Some(true),
            ft: Some("pm".into()),
            ratio: Some(0.75),
            alpha: None,
            shots: Some(16),
            asr_shots: None,
            minutes: None,
            method: None,
            seed: Some(seed),
            metric: metric.into(),
            value,
            aggregate: false,
        }
    }

    #[test]
    fn aggregates_mean_std_count() {
        let mut rows = vec![row("a", 1, "per", 0.2), row("a", 2, "per", 0.4)];
        append_aggregates(&mut rows);
        let mean = rows.iter().find(|r| r.metric == "per_mean").unwrap();
        assert!((mean.value - 0.3).abs() < 1e-12);
        assert!(mean.aggregate && mean.seed.is_none());
        let std = rows.iter().find(|r| r.metric == "per_std").unwrap();
        assert!((std.value - 0.1).abs() < 1e-12);
        let n = rows.iter().find(|r| r.metric == "seed_count").unwrap();
        assert_eq!(n.value, 2.0);
    }

    #[test]
    fn csv_is_sorted_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let mut rows = vec![row("b", 2, "per", 0.5), row("a", 1, "per", 0.1)];
        append_aggregates(&mut rows);
        write_results_csv(&path, &rows).unwrap();
        let a = std::fs::read(&path).unwrap();
        // shuffled input produces identical bytes
        rows.reverse();
        write_results_csv(&path, &rows).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(b).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.contains("t,a,true,pm,0.75,,16,,,,1,per,0.1,false"));
    }
}
