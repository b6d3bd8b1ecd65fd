// SPDX-License-Identifier: MIT OR Apache-2.0

//! Result persistence: one JSON file per experiment plus a flat CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiments::SweepResult;
use crate::harness::records::SourceCategory;
use crate::knockout::{FeatureScope, SoftmaxKnockoutMode};

pub const CSV_HEADER: &str = "category,window_size,first_layer,relative_depth,mean_change_pct,n,skipped,scope";

fn default_workers() -> usize {
    1
}

/// On-disk description of an experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    #[serde(default)]
    pub window_sizes: Vec<usize>,
    #[serde(default)]
    pub categories: Vec<SourceCategory>,
    #[serde(default)]
    pub scopes: Vec<FeatureScope>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub softmax_mode: SoftmaxKnockoutMode,
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Flat CSV rows for any number of sweeps; empty mean cells mark curves
/// whose records were all skipped.
pub fn sweeps_to_csv(results: &[SweepResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        for p in &r.points {
            let mean = p.mean_change_pct.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.category.name(),
                r.window_size,
                p.first_layer,
                p.relative_depth,
                mean,
                p.n,
                p.skipped,
                r.scope
            );
        }
    }
    out
}

pub fn write_csv(path: &Path, results: &[SweepResult]) -> Result<()> {
    std::fs::write(path, sweeps_to_csv(results))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiments::SweepPoint;

    #[test]
    fn csv_layout() {
        let r = SweepResult {
            model_id: "m".into(),
            dataset_id: "d".into(),
            window_size: 2,
            num_layers: 4,
            scope: "all".into(),
            points: vec![
                SweepPoint {
                    category: SourceCategory::Subject,
                    first_layer: 1,
                    relative_depth: 0.25,
                    mean_change_pct: Some(-12.5),
                    n: 3,
                    skipped: 1,
                },
                SweepPoint {
                    category: SourceCategory::Last,
                    first_layer: 0,
                    relative_depth: 0.0,
                    mean_change_pct: None,
                    n: 0,
                    skipped: 4,
                },
            ],
            raw: vec![],
        };
        assert_eq!(
            sweeps_to_csv(&[r]),
            format!("{CSV_HEADER}\nsubject,2,1,0.25,-12.5,3,1,all\nlast,2,0,0,,0,4,all\n")
        );
    }

    #[test]
    fn config_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"model": "m.ssmko", "dataset": "d.jsonl", "output_dir": "out", "categories": ["subject"]}"#,
        )
        .unwrap();
        let c = ExperimentConfig::read(&p).unwrap();
        assert_eq!(c.workers, 1);
        assert_eq!(c.categories, vec![SourceCategory::Subject]);
        assert!(c.window_sizes.is_empty());
        std::fs::write(&p, "{").unwrap();
        assert!(matches!(ExperimentConfig::read(&p), Err(Error::Parse { .. })));
    }
}
