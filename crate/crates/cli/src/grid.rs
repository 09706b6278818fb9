//! Hyperparameter grids and Pareto-frontier extraction.
//!
//! The default grids are the full search spaces: 12 dependency bounds by 5
//! confidence thresholds for the dependency-guided selector (60
//! configurations) and 9 KL thresholds by 5 confidence thresholds for the
//! stability-gated baseline (45 configurations).

use serde::{Deserialize, Serialize};

use crate::bench::{run_benchmark, BenchRecord};
use crate::config::{ExperimentConfig, SelectorConfig, TaskConfig};
use crate::error::{CliError, Result};
use parmask::SamplerConfig;

pub const DEMASK_TAU_GRID: [f64; 12] = [
    0.5, 0.4, 0.3, 0.2, 0.1, 0.08, 0.06, 0.04, 0.02, 0.01, 0.003, 0.001,
];
pub const DEMASK_GAMMA_GRID: [f64; 5] = [0.9, 0.7, 0.5, 0.3, 0.1];
pub const KLASS_KL_GRID: [f64; 9] = [
    0.02, 0.015, 0.01, 0.005, 0.001, 0.0003, 0.0001, 0.00003, 0.00001,
];
pub const KLASS_CONF_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Which selector family the grid sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Demask,
    Klass,
}

impl std::str::FromStr for GridKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demask" => Ok(GridKind::Demask),
            "klass" => Ok(GridKind::Klass),
            other => Err(CliError::Config(format!(
                "unknown grid {other:?}; expected demask or klass"
            ))),
        }
    }
}

/// Selector configurations of the default grid, in stable order.
pub fn grid_configs(kind: GridKind) -> Vec<SelectorConfig> {
    match kind {
        GridKind::Demask => {
            let mut out = Vec::with_capacity(DEMASK_TAU_GRID.len() * DEMASK_GAMMA_GRID.len());
            for &tau in &DEMASK_TAU_GRID {
                for &gamma in &DEMASK_GAMMA_GRID {
                    out.push(SelectorConfig::Demask {
                        tau,
                        gamma,
                        checkpoint: None,
                    });
                }
            }
            out
        }
        GridKind::Klass => {
            let mut out = Vec::with_capacity(KLASS_KL_GRID.len() * KLASS_CONF_GRID.len());
            for &kl in &KLASS_KL_GRID {
                for &conf in &KLASS_CONF_GRID {
                    out.push(SelectorConfig::Klass {
                        kl_threshold: kl,
                        conf_threshold: conf,
                        history_len: 2,
                    });
                }
            }
            out
        }
    }
}

/// Run every configuration of a grid on one task. Records come back in grid
/// order; rerunning with the same seed reproduces them exactly.
pub fn grid_search(
    kind: GridKind,
    task: &TaskConfig,
    sampler: &SamplerConfig,
    eos_fill: bool,
    seeds: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let configs = grid_configs(kind);
    configs
        .into_iter()
        .map(|selector| {
            run_benchmark(&ExperimentConfig {
                task: task.clone(),
                selector,
                sampler: *sampler,
                eos_fill,
                seeds,
                seed,
                verify_bound: false,
                config_id: None,
            })
        })
        .collect()
}

/// Non-dominated subset on (mean steps down, accuracy up): a record is kept
/// unless some other record is at least as good in both metrics and
/// strictly better in one. Output order is by mean steps, then accuracy
/// descending, then config id.
pub fn pareto_frontier(records: &[BenchRecord]) -> Vec<BenchRecord> {
    let mut frontier: Vec<BenchRecord> = records
        .iter()
        .filter(|r| {
            r.mean_steps.is_finite()
                && !records.iter().any(|q| {
                    q.config_id != r.config_id
                        && q.mean_steps.is_finite()
                        && q.mean_steps <= r.mean_steps
                        && q.accuracy >= r.accuracy
                        && (q.mean_steps < r.mean_steps || q.accuracy > r.accuracy)
                })
        })
        .cloned()
        .collect();
    frontier.sort_by(|a, b| {
        a.mean_steps
            .partial_cmp(&b.mean_steps)
            .expect("finite steps")
            .then(b.accuracy.partial_cmp(&a.accuracy).expect("finite accuracy"))
            .then(a.config_id.cmp(&b.config_id))
    });
    frontier
}
