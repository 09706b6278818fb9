//! CSV and summary emission. Outputs are byte-stable for identical inputs:
//! records are written in the order given and floats print in shortest
//! round-trip form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use parmask::verify::{SlackRecord, SlackSizeSummary};

use crate::bench::BenchRecord;
use crate::error::{io_err, CliError, Result};
use crate::grid::pareto_frontier;

/// Write benchmark records as CSV with the versioned header. An empty
/// stream still writes the header row, so downstream parsers see the schema.
pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        // csv emits headers with the first record: serialize a probe and
        // keep only the header line
        w.serialize(probe_record())?;
        let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
        let text = String::from_utf8(bytes).expect("csv output is utf-8");
        let header = text.lines().next().expect("probe produced a header");
        std::fs::write(path, format!("{header}\n")).map_err(|e| io_err(path, e))?;
        return Ok(());
    }
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn probe_record() -> BenchRecord {
    BenchRecord {
        format: crate::bench::BENCH_FORMAT.to_string(),
        config_id: String::new(),
        selector: String::new(),
        tau: None,
        gamma: None,
        k: None,
        kl_threshold: None,
        conf_threshold: None,
        temperature: 0.0,
        top_p: 0.0,
        eos_fill: false,
        seeds: 0,
        accuracy: 0.0,
        mean_steps: 0.0,
        mean_selected: 0.0,
        bound_violation_rate: None,
        dead_ends: 0,
    }
}

/// Read benchmark records back from CSV.
pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Aggregate summary document: frontier, speedups against the one-token
/// entropy baseline when present, and slack CDF tables when provided.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub record_count: usize,
    pub pareto: Vec<ParetoPoint>,
    /// config id -> step-count ratio of the entropy k=1 baseline over the
    /// config (higher is faster), when that baseline is among the records.
    pub speedup_vs_entropy_1tok: Vec<(String, f64)>,
    pub slack_tables: Vec<SlackSizeSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub config_id: String,
    pub mean_steps: f64,
    pub accuracy: f64,
}

/// Build the summary for a record set plus optional slack summaries.
pub fn summarize(records: &[BenchRecord], slack_tables: Vec<SlackSizeSummary>) -> Summary {
    let pareto = pareto_frontier(records)
        .into_iter()
        .map(|r| ParetoPoint {
            config_id: r.config_id,
            mean_steps: r.mean_steps,
            accuracy: r.accuracy,
        })
        .collect();
    let baseline = records
        .iter()
        .find(|r| r.selector == "entropy" && r.k == Some(1))
        .map(|r| r.mean_steps);
    let speedup = match baseline {
        Some(base) if base.is_finite() => records
            .iter()
            .filter(|r| r.mean_steps.is_finite() && r.mean_steps > 0.0)
            .map(|r| (r.config_id.clone(), base / r.mean_steps))
            .collect(),
        _ => Vec::new(),
    };
    Summary {
        record_count: records.len(),
        pareto,
        speedup_vs_entropy_1tok: speedup,
        slack_tables,
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(CliError::from_json)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write slack records as CSV for external plotting.
pub fn write_slack_csv(records: &[SlackRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

impl CliError {
    fn from_json(e: serde_json::Error) -> Self {
        CliError::Core(parmask::Error::Json(e))
    }
}
