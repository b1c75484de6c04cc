//! Run metrics and report files.
//!
//! `report.json` carries only seed-deterministic content so that identical
//! seeds reproduce it byte for byte; wall-clock latencies go to a separate
//! `timing.json`.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub num_queries: usize,
    pub routing_accuracy: f64,
    pub task_accuracy: f64,
    pub f1: f64,
    pub avg_chain_length_adaptive: f64,
    pub avg_chain_length_fixed: f64,
    pub reduction_percent: f64,
    pub config: RunConfig,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "report".into(),
                path: path.to_path_buf(),
            });
        }
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// Wall-clock per-query latency summary. Not deterministic, kept out of
/// the report proper.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub queries: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl Timing {
    pub fn from_samples(mut samples: Vec<f64>) -> Option<Timing> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantile = |q: f64| -> f64 {
            let idx = ((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1;
            samples[idx]
        };
        Some(Timing {
            queries: samples.len(),
            median_ms: quantile(0.5),
            p95_ms: quantile(0.95),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// Macro-averaged F1 over the labels that occur in the gold answers.
pub fn macro_f1(gold: &[String], predicted: &[String], labels: &[String]) -> f64 {
    assert_eq!(gold.len(), predicted.len());
    let mut f1s = Vec::new();
    for label in labels {
        let tp = gold
            .iter()
            .zip(predicted)
            .filter(|(g, p)| *g == label && *p == label)
            .count() as f64;
        let in_gold = gold.iter().filter(|g| *g == label).count() as f64;
        let in_pred = predicted.iter().filter(|p| *p == label).count() as f64;
        if in_gold == 0.0 {
            continue; // label absent from this run's gold set
        }
        let precision = if in_pred > 0.0 { tp / in_pred } else { 0.0 };
        let recall = tp / in_gold;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1s.push(f1);
    }
    if f1s.is_empty() {
        return 0.0;
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

/// One row of the gamma-sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub task_accuracy: f64,
    pub f1: f64,
    pub avg_chain_length: f64,
    pub reduction_percent: f64,
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "gamma,task_accuracy,f1,avg_chain_length,reduction_percent"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.gamma, r.task_accuracy, r.f1, r.avg_chain_length, r.reduction_percent
        )?;
    }
    Ok(())
}
