//! Command-line front end for the parmask library: model generation, TV
//! cache generation, predictor training, decoding, benchmarking, grid
//! search, bound verification, slack validation, and report emission.

pub mod bench;
pub mod config;
pub mod error;
pub mod grid;
pub mod report;

pub use bench::{run_benchmark, BenchRecord};
pub use config::{ExperimentConfig, SelectorConfig, TaskConfig};
pub use error::{CliError, Result};
pub use grid::{grid_search, pareto_frontier, GridKind};
