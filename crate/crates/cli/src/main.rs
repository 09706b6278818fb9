use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use parmask::decoding::{decode, write_trace_jsonl};
use parmask::predictor::{
    examples_from_cache, generate_tv_cache, read_cache_jsonl, save_checkpoint, train_predictor,
    write_cache_jsonl, CacheGenConfig, FeatureConfig, TrainSettings,
};
use parmask::seed::seeded_rng;
use parmask::verify::{
    read_jsonl, run_slack_experiment, run_theorem_suite, summarize_slack, write_jsonl,
    SlackExperimentConfig, TheoremSuiteConfig,
};
use parmask::{ModelSpec, SamplerConfig, TabularModel, TaskKind};

use parmask_cli::bench::{run_benchmark, BenchRecord};
use parmask_cli::config::{ExperimentConfig, SelectorConfig, TaskConfig};
use parmask_cli::error::{io_err, CliError, Result};
use parmask_cli::grid::{grid_search, pareto_frontier, GridKind, DEMASK_TAU_GRID};
use parmask_cli::report::{
    read_bench_csv, summarize, write_bench_csv, write_slack_csv, write_summary,
};

#[derive(Parser)]
#[command(
    name = "parmask",
    version,
    about = "Dependency-guided parallel unmasking over exact tabular sequence models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_kind(s: &str) -> std::result::Result<TaskKind, String> {
    match s {
        "independent" => Ok(TaskKind::Independent),
        "markov" => Ok(TaskKind::Markov),
        "copy" => Ok(TaskKind::Copy),
        "arithmetic-mod" => Ok(TaskKind::ArithmeticMod),
        "dense-random" => Ok(TaskKind::DenseRandom),
        other => Err(format!(
            "unknown kind {other:?}; expected independent, markov, copy, arithmetic-mod, or dense-random"
        )),
    }
}

fn parse_grid(s: &str) -> std::result::Result<GridKind, String> {
    s.parse::<GridKind>().map_err(|e| e.to_string())
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Task family
    #[arg(long, value_parser = parse_kind, default_value = "dense-random")]
    family: TaskKind,
    #[arg(long, default_value_t = 3)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    eos_id: usize,
    #[arg(long, default_value_t = 4)]
    length: usize,
    /// Number of prompt variants in the family
    #[arg(long, default_value_t = 1)]
    prompts: usize,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

impl TaskArgs {
    fn to_config(&self) -> TaskConfig {
        TaskConfig {
            family: self.family,
            vocab_size: self.vocab_size,
            eos_id: self.eos_id,
            length: self.length,
            prompts: self.prompts,
            model_seed: self.model_seed,
        }
    }
}

#[derive(Args, Clone)]
struct SelectorArgs {
    /// Position selector: demask, entropy, top1, token-order, or klass
    #[arg(long, default_value = "demask")]
    selector: String,
    /// Dependency budget (demask)
    #[arg(long, default_value_t = 0.04)]
    tau: f64,
    /// Confidence threshold (demask)
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Predictor checkpoint; exact dependencies when omitted (demask)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Positions per step (entropy, top1, token-order)
    #[arg(long, default_value_t = 1)]
    tokens_per_step: usize,
    /// Stability threshold (klass)
    #[arg(long, default_value_t = 3e-4)]
    kl_threshold: f64,
    /// Confidence threshold (klass)
    #[arg(long, default_value_t = 0.9)]
    conf_threshold: f64,
    /// History window (klass)
    #[arg(long, default_value_t = 2)]
    history: usize,
}

impl SelectorArgs {
    fn to_config(&self) -> Result<SelectorConfig> {
        Ok(match self.selector.as_str() {
            "demask" => SelectorConfig::Demask {
                tau: self.tau,
                gamma: self.gamma,
                checkpoint: self.checkpoint.clone(),
            },
            "entropy" => SelectorConfig::Entropy {
                k: self.tokens_per_step,
            },
            "top1" => SelectorConfig::Top1 {
                k: self.tokens_per_step,
            },
            "token-order" => SelectorConfig::TokenOrder {
                k: self.tokens_per_step,
            },
            "klass" => SelectorConfig::Klass {
                kl_threshold: self.kl_threshold,
                conf_threshold: self.conf_threshold,
                history_len: self.history,
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown selector {other:?}; expected demask, entropy, top1, token-order, or klass"
                )))
            }
        })
    }
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
}

impl SamplerArgs {
    fn to_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig::new(self.temperature, self.top_p)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a model description file
    ModelGen {
        #[arg(long, value_parser = parse_kind)]
        kind: TaskKind,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        eos_id: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        prompt_id: u64,
        /// Spikiness of the dense-random joint
        #[arg(long)]
        concentration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a TV cache from model description files
    CacheGen {
        /// Model description file; repeatable
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        responses: usize,
        #[arg(long, default_value_t = 5)]
        samples_per_response: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dependency predictor on a TV cache
    Train {
        #[arg(long)]
        cache: PathBuf,
        /// Model description files referenced by the cache; repeatable
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training report destination (loss curves, best epoch)
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Decode one sequence and print it
    Decode {
        /// Model description file
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        selector: SelectorArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = false)]
        eos_fill: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Step-by-step trace destination (JSON lines)
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run benchmark configurations and write a CSV of records
    Bench {
        /// Experiment config file; repeatable. Inline flags apply when no
        /// config file is given.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        selector: SelectorArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = false)]
        eos_fill: bool,
        /// Decode repetitions per configuration
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Measure per-step joint-vs-factorized TV against tau (demask)
        #[arg(long, default_value_t = false)]
        verify_bound: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a hyperparameter grid and emit records plus the Pareto frontier
    Grid {
        /// Grid family: demask or klass
        #[arg(long, value_parser = parse_grid)]
        grid: GridKind,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = false)]
        eos_fill: bool,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for records.csv, frontier.csv, and summary.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the selection bound on randomized instances with exact
    /// dependencies
    VerifyBound {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_vocab: usize,
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        /// Confidence thresholds sampled per instance
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.9])]
        gammas: Vec<f64>,
        /// Per-instance report destination (JSON lines)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the sub-additivity slack experiment
    ValidateSubadd {
        /// Task families pooled into the experiment; repeatable
        #[arg(long, value_parser = parse_kind, default_values = ["dense-random", "markov", "copy"])]
        family: Vec<TaskKind>,
        #[arg(long, default_value_t = 3)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        eos_id: usize,
        #[arg(long, default_value_t = 5)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        max_subset: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-record destination (JSON lines)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-record CSV destination
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Recompute Pareto frontier and summary documents from records
    Report {
        /// Benchmark records CSV
        #[arg(long)]
        records: PathBuf,
        /// Slack records (JSON lines) to fold into the summary
        #[arg(long)]
        slack: Option<PathBuf>,
        /// Directory for frontier.csv and summary.json
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "category": e.category(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<TabularModel>> {
    paths
        .iter()
        .map(|p| Ok(ModelSpec::from_path(p)?.build()?))
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ModelGen {
            kind,
            vocab_size,
            eos_id,
            length,
            seed,
            prompt_id,
            concentration,
            out,
        } => {
            let spec = ModelSpec {
                kind,
                vocab_size,
                eos_id,
                length,
                seed,
                prompt_id,
                concentration,
                enumeration_cap: None,
            };
            let model = spec.build()?;
            spec.to_path(&out)?;
            println!(
                "{}",
                serde_json::json!({ "model_id": model.id(), "path": out })
            );
            Ok(())
        }
        Command::CacheGen {
            model,
            responses,
            samples_per_response,
            seed,
            out,
        } => {
            let models = load_models(&model)?;
            let records = generate_tv_cache(
                &models,
                &CacheGenConfig {
                    responses_per_model: responses,
                    samples_per_response,
                    seed,
                },
            )?;
            write_cache_jsonl(&records, &out)?;
            println!(
                "{}",
                serde_json::json!({ "records": records.len(), "path": out })
            );
            Ok(())
        }
        Command::Train {
            cache,
            model,
            epochs,
            learning_rate,
            weight_decay,
            batch_size,
            val_fraction,
            seed,
            out,
            report_out,
        } => {
            let models = load_models(&model)?;
            let first = models
                .first()
                .ok_or_else(|| CliError::Config("at least one model is required".into()))?;
            let (v, n) = (first.vocab().size, first.len());
            if models.iter().any(|m| m.vocab().size != v || m.len() != n) {
                return Err(CliError::Config(
                    "all models must share vocab size and length for one featurizer".into(),
                ));
            }
            let fcfg = FeatureConfig::full(v, n);
            let registry: HashMap<String, TabularModel> =
                models.into_iter().map(|m| (m.id(), m)).collect();
            let records = read_cache_jsonl(&cache)?;
            let examples = examples_from_cache(&records, &registry, &fcfg)?;
            let settings = TrainSettings {
                learning_rate,
                weight_decay,
                epochs,
                batch_size,
                val_fraction,
                ..TrainSettings::default()
            };
            let (weights, report) = train_predictor(&examples, fcfg.d(), &settings, seed)?;
            save_checkpoint(&weights, &fcfg, &out)?;
            if let Some(path) = report_out {
                let text = serde_json::to_string_pretty(&report).map_err(parmask::Error::from)?;
                std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "examples": examples.len(),
                    "initial_loss": report.initial_train_loss,
                    "final_loss": report.final_train_loss,
                    "best_epoch": report.best_epoch,
                    "checkpoint": out
                })
            );
            Ok(())
        }
        Command::Decode {
            model,
            selector,
            sampler,
            eos_fill,
            seed,
            trace_out,
        } => {
            let model = ModelSpec::from_path(&model)?.build()?;
            let sel = selector.to_config()?.build()?;
            let sampler = sampler.to_config()?;
            let mut rng = seeded_rng(seed);
            let (sequence, trace) = decode(&model, &sel, &sampler, eos_fill, &mut rng)?;
            if let Some(path) = trace_out {
                write_trace_jsonl(&trace, &path)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "model_id": model.id(),
                    "sequence": sequence,
                    "steps": trace.step_count,
                    "eos_filled": trace.eos_filled,
                    "in_support": model.mass(&sequence) > 0.0
                })
            );
            Ok(())
        }
        Command::Bench {
            config,
            task,
            selector,
            sampler,
            eos_fill,
            seeds,
            seed,
            verify_bound,
            out,
        } => {
            let configs: Vec<ExperimentConfig> = if config.is_empty() {
                vec![ExperimentConfig {
                    task: task.to_config(),
                    selector: selector.to_config()?,
                    sampler: sampler.to_config()?,
                    eos_fill,
                    seeds,
                    seed,
                    verify_bound,
                    config_id: None,
                }]
            } else {
                config
                    .iter()
                    .map(|p| ExperimentConfig::from_path(p))
                    .collect::<Result<Vec<_>>>()?
            };
            let records: Vec<BenchRecord> = configs
                .iter()
                .map(run_benchmark)
                .collect::<Result<Vec<_>>>()?;
            write_bench_csv(&records, &out)?;
            for r in &records {
                println!(
                    "{}",
                    serde_json::to_string(r).map_err(parmask::Error::from)?
                );
            }
            Ok(())
        }
        Command::Grid {
            grid,
            task,
            sampler,
            eos_fill,
            seeds,
            seed,
            out,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let records = grid_search(
                grid,
                &task.to_config(),
                &sampler.to_config()?,
                eos_fill,
                seeds,
                seed,
            )?;
            let frontier = pareto_frontier(&records);
            write_bench_csv(&records, &out.join("records.csv"))?;
            write_bench_csv(&frontier, &out.join("frontier.csv"))?;
            let summary = summarize(&records, Vec::new());
            write_summary(&summary, &out.join("summary.json"))?;
            println!(
                "{}",
                serde_json::json!({
                    "records": records.len(),
                    "frontier": frontier.len(),
                    "dir": out
                })
            );
            Ok(())
        }
        Command::VerifyBound {
            instances,
            seed,
            max_vocab,
            max_len,
            gammas,
            out,
        } => {
            let cfg = TheoremSuiteConfig {
                n_instances: instances,
                seed,
                max_vocab,
                max_len,
                taus: DEMASK_TAU_GRID.to_vec(),
                gammas,
            };
            let reports = run_theorem_suite(&cfg)?;
            if let Some(path) = &out {
                write_jsonl(&reports, path)?;
            }
            let assumption_ok = reports.iter().filter(|r| r.assumption_holds).count();
            let violations: Vec<u64> = reports
                .iter()
                .filter(|r| r.assumption_holds && !r.bound_satisfied)
                .map(|r| r.instance_id)
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "instances": reports.len(),
                    "assumption_holds": assumption_ok,
                    "assumption_fails": reports.len() - assumption_ok,
                    "violations_with_assumption": violations.len(),
                    "violating_instances": violations,
                })
            );
            if !violations.is_empty() {
                return Err(CliError::Config(format!(
                    "bound violated on {} instances where the assumption holds",
                    violations.len()
                )));
            }
            Ok(())
        }
        Command::ValidateSubadd {
            family,
            vocab_size,
            eos_id,
            length,
            model_seed,
            instances,
            max_subset,
            seed,
            out,
            csv_out,
        } => {
            let mut models = Vec::new();
            for (i, kind) in family.iter().enumerate() {
                models.extend(
                    TaskConfig {
                        family: *kind,
                        vocab_size,
                        eos_id,
                        length,
                        prompts: 2,
                        model_seed: model_seed.wrapping_add(i as u64),
                    }
                    .build_models()?,
                );
            }
            let records = run_slack_experiment(
                &models,
                &SlackExperimentConfig {
                    n_instances: instances,
                    max_subset,
                    seed,
                },
            )?;
            if let Some(path) = &out {
                write_jsonl(&records, path)?;
            }
            if let Some(path) = &csv_out {
                write_slack_csv(&records, path)?;
            }
            let summary = summarize_slack(&records);
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).map_err(parmask::Error::from)?
            );
            Ok(())
        }
        Command::Report {
            records,
            slack,
            out,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let bench_records = read_bench_csv(&records)?;
            let slack_tables = match &slack {
                Some(path) => summarize_slack(&read_jsonl(path)?),
                None => Vec::new(),
            };
            let frontier = pareto_frontier(&bench_records);
            write_bench_csv(&frontier, &out.join("frontier.csv"))?;
            let summary = summarize(&bench_records, slack_tables);
            write_summary(&summary, &out.join("summary.json"))?;
            println!(
                "{}",
                serde_json::json!({
                    "records": bench_records.len(),
                    "frontier": frontier.len(),
                    "dir": out
                })
            );
            Ok(())
        }
    }
}
