//! Experiment configuration: task families, selector settings, and the
//! benchmark config document. Config files are strict key-value documents;
//! unknown keys are rejected so that grids stay reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use parmask::decoding::{DepMode, KlassConfig, Selector};
use parmask::predictor::load_checkpoint;
use parmask::{
    make_task_model_for_prompt, SamplerConfig, SelectionConfig, TabularModel, TaskKind, VocabSpec,
};

use crate::error::{CliError, Result};

/// A family of models sharing one task kind: one model per prompt id. For
/// the arithmetic family the prompt is the given operand; the random
/// families reseed per prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub family: TaskKind,
    pub vocab_size: usize,
    pub eos_id: usize,
    pub length: usize,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default)]
    pub model_seed: u64,
}

fn default_prompts() -> usize {
    1
}

impl TaskConfig {
    pub fn build_models(&self) -> Result<Vec<TabularModel>> {
        if self.prompts == 0 {
            return Err(CliError::Config("task.prompts must be >= 1".into()));
        }
        let vocab = VocabSpec::new(self.vocab_size, self.eos_id)?;
        (0..self.prompts)
            .map(|p| {
                make_task_model_for_prompt(
                    self.family,
                    vocab,
                    self.length,
                    self.model_seed,
                    p as u64,
                )
                .map_err(CliError::from)
            })
            .collect()
    }
}

/// Selector choice plus its parameters, as written in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SelectorConfig {
    Demask {
        tau: f64,
        gamma: f64,
        /// Path to a predictor checkpoint; exact dependencies when absent.
        #[serde(default)]
        checkpoint: Option<PathBuf>,
    },
    Entropy {
        k: usize,
    },
    Top1 {
        k: usize,
    },
    TokenOrder {
        k: usize,
    },
    Klass {
        kl_threshold: f64,
        conf_threshold: f64,
        #[serde(default = "default_history")]
        history_len: usize,
    },
}

fn default_history() -> usize {
    2
}

impl SelectorConfig {
    pub fn build(&self) -> Result<Selector> {
        Ok(match self {
            SelectorConfig::Demask {
                tau,
                gamma,
                checkpoint,
            } => {
                let cfg = SelectionConfig::new(*tau, *gamma)?;
                let dep = match checkpoint {
                    None => DepMode::Exact,
                    Some(path) => {
                        let (weights, features) = load_checkpoint(path)?;
                        DepMode::Predicted { weights, features }
                    }
                };
                Selector::Demask { cfg, dep }
            }
            SelectorConfig::Entropy { k } => Selector::Entropy { k: require_k(*k)? },
            SelectorConfig::Top1 { k } => Selector::Top1 { k: require_k(*k)? },
            SelectorConfig::TokenOrder { k } => Selector::TokenOrder { k: require_k(*k)? },
            SelectorConfig::Klass {
                kl_threshold,
                conf_threshold,
                history_len,
            } => Selector::Klass {
                cfg: KlassConfig::new(*kl_threshold, *conf_threshold, *history_len)?,
            },
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectorConfig::Demask { .. } => "demask",
            SelectorConfig::Entropy { .. } => "entropy",
            SelectorConfig::Top1 { .. } => "top1",
            SelectorConfig::TokenOrder { .. } => "token-order",
            SelectorConfig::Klass { .. } => "klass",
        }
    }
}

fn require_k(k: usize) -> Result<usize> {
    if k == 0 {
        return Err(CliError::Config("selector.k must be >= 1".into()));
    }
    Ok(k)
}

/// One benchmark run: a task family decoded with one selector configuration
/// over a block of seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub selector: SelectorConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eos_fill: bool,
    /// Number of decode repetitions; each owns a derived rng stream.
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Measure the per-step joint-vs-factorized TV against tau (demask only).
    #[serde(default)]
    pub verify_bound: bool,
    #[serde(default)]
    pub config_id: Option<String>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::io_err(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(CliError::Config("seeds must be >= 1".into()));
        }
        SamplerConfig::new(self.sampler.temperature, self.sampler.top_p)?;
        self.selector.build()?;
        self.task.build_models()?;
        Ok(())
    }

    /// Stable identifier for reports; derived from the selector parameters
    /// unless the config names one explicitly.
    pub fn id(&self) -> String {
        if let Some(id) = &self.config_id {
            return id.clone();
        }
        match &self.selector {
            SelectorConfig::Demask { tau, gamma, .. } => format!("demask-t{tau}-g{gamma}"),
            SelectorConfig::Entropy { k } => format!("entropy-k{k}"),
            SelectorConfig::Top1 { k } => format!("top1-k{k}"),
            SelectorConfig::TokenOrder { k } => format!("token-order-k{k}"),
            SelectorConfig::Klass {
                kl_threshold,
                conf_threshold,
                ..
            } => format!("klass-kl{kl_threshold}-c{conf_threshold}"),
        }
    }
}
