//! Iterative diffusion-style generation.
//!
//! Each step recomputes the conditional marginals of every masked position
//! (one "forward pass" of the tabular oracle), asks a selector which
//! positions to commit, samples those positions independently from their
//! transformed marginals, and reveals them. The step count therefore equals
//! the number of forward passes, which is the quantity the speedup metric is
//! defined on.
//!
//! Selection and confidence filtering run on the raw marginals; only the
//! committed values are drawn from the transformed ones.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{all_masked_marginals, MaskState, Position, TabularModel, Token};
use crate::predictor::{featurize, predict_dependency, FeatureConfig, PredictorWeights};
use crate::sampling::{entropy, kl_divergence_guarded, transform_sample, SamplerConfig};
use crate::selection::{greedy_subset_select, SelectionConfig, SelectionResult};
use crate::tv::dependency_matrix_exact;

/// Stability-based selector settings: a position qualifies when its marginal
/// stayed within the KL threshold across consecutive snapshots over the full
/// history window and its current top-1 clears the confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlassConfig {
    pub kl_threshold: f64,
    pub conf_threshold: f64,
    pub history_len: usize,
}

impl Default for KlassConfig {
    fn default() -> Self {
        // grid-selected operating point, history window of 2
        Self {
            kl_threshold: 3e-4,
            conf_threshold: 0.9,
            history_len: 2,
        }
    }
}

impl KlassConfig {
    pub fn new(kl_threshold: f64, conf_threshold: f64, history_len: usize) -> Result<Self> {
        if kl_threshold.is_nan() || kl_threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "kl_threshold must be >= 0, got {kl_threshold}"
            )));
        }
        if !(0.0..=1.0).contains(&conf_threshold) {
            return Err(Error::InvalidConfig(format!(
                "conf_threshold must be in [0, 1], got {conf_threshold}"
            )));
        }
        if history_len == 0 {
            return Err(Error::InvalidConfig("history_len must be positive".into()));
        }
        Ok(Self {
            kl_threshold,
            conf_threshold,
            history_len,
        })
    }
}

/// Where the demask selector takes its dependency matrix from.
#[derive(Debug, Clone)]
pub enum DepMode {
    /// Exact oracle values recomputed every step.
    Exact,
    /// Bilinear predictor over the featurized context.
    Predicted {
        weights: PredictorWeights,
        features: FeatureConfig,
    },
}

/// Position-selection strategies for one decoding step.
#[derive(Debug, Clone)]
pub enum Selector {
    /// Greedy dependency-bounded subset selection.
    Demask { cfg: SelectionConfig, dep: DepMode },
    /// k lowest-entropy positions.
    Entropy { k: usize },
    /// k highest top-1 probability positions.
    Top1 { k: usize },
    /// k left-most positions.
    TokenOrder { k: usize },
    /// Stability-gated selection over marginal history.
    Klass { cfg: KlassConfig },
}

impl Selector {
    pub fn name(&self) -> &'static str {
        match self {
            Selector::Demask { .. } => "demask",
            Selector::Entropy { .. } => "entropy",
            Selector::Top1 { .. } => "top1",
            Selector::TokenOrder { .. } => "token-order",
            Selector::Klass { .. } => "klass",
        }
    }

    fn history_len(&self) -> usize {
        match self {
            Selector::Klass { cfg } => cfg.history_len,
            _ => 0,
        }
    }
}

/// Per-position marginal snapshots from prior steps, newest last, capped at
/// the configured history length.
#[derive(Debug, Clone, Default)]
pub struct KlassHistory {
    cap: usize,
    snapshots: HashMap<Position, Vec<Vec<f64>>>,
}

impl KlassHistory {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            snapshots: HashMap::new(),
        }
    }

    /// Record this step's marginals for positions that remain masked.
    pub fn push_step(&mut self, masked: &[Position], marginals: &[Vec<f64>], next: &MaskState) {
        if self.cap == 0 {
            return;
        }
        for (rank, &pos) in masked.iter().enumerate() {
            if !next.is_masked(pos) {
                self.snapshots.remove(&pos);
                continue;
            }
            let entry = self.snapshots.entry(pos).or_default();
            entry.push(marginals[rank].clone());
            if entry.len() > self.cap {
                entry.remove(0);
            }
        }
    }

    fn full(&self, pos: Position) -> Option<&[Vec<f64>]> {
        let snaps = self.snapshots.get(&pos)?;
        (snaps.len() == self.cap).then_some(snaps.as_slice())
    }
}

fn top1(dist: &[f64]) -> f64 {
    dist.iter().copied().fold(0.0, f64::max)
}

/// k positions with the lowest marginal entropy; ties break to the lowest
/// index. Returns all of the mask when k exceeds it.
pub fn select_entropy_k(
    marginals: &[Vec<f64>],
    masked: &[Position],
    k: usize,
) -> Result<Vec<Position>> {
    select_by_score(marginals, masked, k, entropy)
}

/// k positions with the highest top-1 probability; ties break to the lowest
/// index.
pub fn select_top1_k(
    marginals: &[Vec<f64>],
    masked: &[Position],
    k: usize,
) -> Result<Vec<Position>> {
    select_by_score(marginals, masked, k, |d| -top1(d))
}

fn select_by_score(
    marginals: &[Vec<f64>],
    masked: &[Position],
    k: usize,
    score: impl Fn(&[f64]) -> f64,
) -> Result<Vec<Position>> {
    if masked.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut scored: Vec<(f64, Position)> = marginals
        .iter()
        .zip(masked)
        .map(|(d, &p)| (score(d), p))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores").then(a.1.cmp(&b.1)));
    let mut chosen: Vec<Position> = scored.into_iter().take(k).map(|(_, p)| p).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The k left-most masked positions.
pub fn select_token_order_k(
    _marginals: &[Vec<f64>],
    masked: &[Position],
    k: usize,
) -> Result<Vec<Position>> {
    if masked.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    Ok(masked.iter().copied().take(k).collect())
}

/// Positions whose marginals stayed stable across the full history window
/// and whose current top-1 clears the confidence threshold. Falls back to
/// the single highest-top-1 position when nothing qualifies, so a step
/// always commits at least one token.
pub fn select_klass(
    history: &KlassHistory,
    marginals: &[Vec<f64>],
    masked: &[Position],
    cfg: &KlassConfig,
) -> Result<Vec<Position>> {
    if masked.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    let mut chosen = Vec::new();
    for (rank, &pos) in masked.iter().enumerate() {
        let Some(snaps) = history.full(pos) else {
            continue;
        };
        // consecutive KLs over [prior..., current], newer against older
        let mut max_kl = 0.0f64;
        for w in snaps.windows(2) {
            max_kl = max_kl.max(kl_divergence_guarded(&w[1], &w[0]));
        }
        max_kl = max_kl.max(kl_divergence_guarded(
            &marginals[rank],
            snaps.last().expect("full history is nonempty"),
        ));
        if max_kl < cfg.kl_threshold && top1(&marginals[rank]) > cfg.conf_threshold {
            chosen.push(pos);
        }
    }
    if chosen.is_empty() {
        let mut best = (f64::NEG_INFINITY, masked[0]);
        for (rank, &pos) in masked.iter().enumerate() {
            let c = top1(&marginals[rank]);
            if c > best.0 {
                best = (c, pos);
            }
        }
        chosen.push(best.1);
    }
    Ok(chosen)
}

/// Reveal every masked position to the right of the first revealed EOS as
/// EOS, returning the filled state and the filled positions. No-op when no
/// revealed position holds EOS.
pub fn eos_fill(state: &MaskState, eos_id: Token) -> (MaskState, Vec<Position>) {
    let first_eos = state
        .revealed()
        .iter()
        .find(|(_, &v)| v == eos_id)
        .map(|(&p, _)| p);
    let Some(cut) = first_eos else {
        return (state.clone(), Vec::new());
    };
    let fill: Vec<Position> = state
        .masked()
        .iter()
        .copied()
        .filter(|&p| p > cut)
        .collect();
    if fill.is_empty() {
        return (state.clone(), Vec::new());
    }
    let next = state.reveal_many(fill.iter().map(|&p| (p, eos_id)));
    (next, fill)
}

/// One selector decision, with the greedy audit trail when demask ran.
#[derive(Debug, Clone)]
pub struct StepChoice {
    pub positions: Vec<Position>,
    pub selection: Option<SelectionResult>,
}

/// Deterministic step selection shared by the decoder and the exact
/// branch enumerator in the verification harness.
pub fn choose_step(
    model: &TabularModel,
    state: &MaskState,
    marginals: &[Vec<f64>],
    selector: &Selector,
    history: &KlassHistory,
) -> Result<StepChoice> {
    let masked = state.masked();
    match selector {
        Selector::Demask { cfg, dep } => {
            let matrix = match dep {
                DepMode::Exact => dependency_matrix_exact(model, state)?,
                DepMode::Predicted { weights, features } => {
                    let h = featurize(model, state, features)?;
                    predict_dependency(&h, weights)?
                }
            };
            let top1s: Vec<f64> = marginals.iter().map(|d| top1(d)).collect();
            let result = greedy_subset_select(&matrix, masked, &top1s, cfg)?;
            Ok(StepChoice {
                positions: result.chosen.clone(),
                selection: Some(result),
            })
        }
        Selector::Entropy { k } => Ok(StepChoice {
            positions: select_entropy_k(marginals, masked, *k)?,
            selection: None,
        }),
        Selector::Top1 { k } => Ok(StepChoice {
            positions: select_top1_k(marginals, masked, *k)?,
            selection: None,
        }),
        Selector::TokenOrder { k } => Ok(StepChoice {
            positions: select_token_order_k(marginals, masked, *k)?,
            selection: None,
        }),
        Selector::Klass { cfg } => Ok(StepChoice {
            positions: select_klass(history, marginals, masked, cfg)?,
            selection: None,
        }),
    }
}

/// One decoding step as recorded in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeStep {
    pub index: usize,
    pub state_before: MaskState,
    pub selected: Vec<Position>,
    pub per_pick_delta: Option<Vec<f64>>,
    pub accumulated: Option<f64>,
    pub sampled: Vec<(Position, Token)>,
    pub filled: Vec<Position>,
}

/// Full decoding audit: per-step records, the forward-pass count, and every
/// position committed by EOS fast-fill.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<DecodeStep>,
    pub step_count: usize,
    pub eos_filled: Vec<Position>,
}

impl DecodeTrace {
    /// Mean committed positions per step, counting only sampled tokens.
    pub fn mean_selected(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let total: usize = self.steps.iter().map(|s| s.sampled.len()).sum();
        total as f64 / self.steps.len() as f64
    }
}

/// Decode from a fully masked sequence.
pub fn decode<R: Rng>(
    model: &TabularModel,
    selector: &Selector,
    sampler: &SamplerConfig,
    eos_fill_enabled: bool,
    rng: &mut R,
) -> Result<(Vec<Token>, DecodeTrace)> {
    decode_from(
        model,
        &MaskState::fully_masked(model.len()),
        selector,
        sampler,
        eos_fill_enabled,
        rng,
    )
}

/// Decode from an arbitrary starting context.
pub fn decode_from<R: Rng>(
    model: &TabularModel,
    initial: &MaskState,
    selector: &Selector,
    sampler: &SamplerConfig,
    eos_fill_enabled: bool,
    rng: &mut R,
) -> Result<(Vec<Token>, DecodeTrace)> {
    let mut state = initial.clone();
    let mut history = KlassHistory::new(selector.history_len());
    let mut trace = DecodeTrace {
        steps: Vec::new(),
        step_count: 0,
        eos_filled: Vec::new(),
    };
    while !state.is_complete() {
        let marginals = all_masked_marginals(model, &state)?;
        trace.step_count += 1;
        let choice = choose_step(model, &state, &marginals, selector, &history)?;
        if choice.positions.is_empty() {
            return Err(Error::NoProgress);
        }
        let sampled: Vec<(Position, Token)> = choice
            .positions
            .iter()
            .map(|&p| {
                let rank = state.rank(p).expect("selector returned a masked position");
                (p, transform_sample(&marginals[rank], sampler, rng))
            })
            .collect();
        let mut next = state.reveal_many(sampled.iter().copied());
        let mut filled = Vec::new();
        if eos_fill_enabled {
            let (after_fill, f) = eos_fill(&next, model.vocab().eos_id);
            next = after_fill;
            filled = f;
        }
        history.push_step(state.masked(), &marginals, &next);
        trace.eos_filled.extend(filled.iter().copied());
        trace.steps.push(DecodeStep {
            index: trace.step_count,
            state_before: state.clone(),
            selected: choice.positions,
            per_pick_delta: choice.selection.as_ref().map(|s| s.per_pick_delta.clone()),
            accumulated: choice.selection.as_ref().map(|s| s.accumulated),
            sampled,
            filled,
        });
        state = next;
    }
    Ok((state.sequence().expect("decoding completed"), trace))
}

/// Export a trace as line-delimited JSON, one step per line.
pub fn write_trace_jsonl(trace: &DecodeTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for step in &trace.steps {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
