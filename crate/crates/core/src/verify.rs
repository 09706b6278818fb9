//! Brute-force verification harness.
//!
//! Everything here is decidable by exhaustive enumeration at small vocab and
//! length: the TV gap between a joint conditional and its factorized
//! approximation, the per-prefix sub-additivity predicate behind the greedy
//! bound, the exact output distribution a decode policy induces, and the
//! slack experiment stratified by subset size.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use crate::decoding::{choose_step, DepMode, KlassHistory, Selector};
use crate::error::{Error, Result};
use crate::model::{
    all_masked_marginals, checked_pow, make_task_model_for_prompt, sample_sequential, MaskState,
    OrderPolicy, Position, TabularModel, TaskKind, VocabSpec,
};
use crate::sampling::{sample_index, transform_distribution, SamplerConfig};
use crate::seed;
use crate::selection::{greedy_subset_select, SelectionConfig};
use crate::tv::{
    dependency_matrix_exact, subadditivity_slack, tv_unchecked, ContextTable, DependencyMatrix,
};

/// Tolerance for the theorem bound check; absorbs floating-point
/// accumulation in quantities that are exact rationals in principle.
pub const BOUND_TOL: f64 = 1e-9;

/// Tolerance for the per-prefix assumption predicate. Much tighter than the
/// bound tolerance so that instances admitted as "assumption holds" cannot
/// push the measured gap past `BOUND_TOL` through rounding alone.
pub const ASSUMPTION_TOL: f64 = 1e-12;

/// Result of one bound verification: the selected subset, the measured TV
/// between joint and factorized distributions over it, and the per-prefix
/// sub-additivity flags evaluated by exact expectation over histories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub instance_id: u64,
    pub model_id: String,
    pub tau: f64,
    pub gamma: f64,
    pub selected: Vec<Position>,
    pub accumulated: f64,
    pub measured_tv: f64,
    pub bound_satisfied: bool,
    /// One flag per prefix length t = 2..=|S|, in pick order.
    pub assumption_prefix_holds: Vec<bool>,
    pub assumption_holds: bool,
}

/// TV between the exact joint conditional over `subset` and the fully
/// factorized product of its per-position conditionals.
pub fn tv_joint_vs_factorized(
    model: &TabularModel,
    state: &MaskState,
    subset: &[Position],
) -> Result<f64> {
    let ranks = ranks_of(state, subset)?;
    checked_pow(model.vocab().size, subset.len(), model.enumeration_cap())?;
    if model.is_independent() {
        // the joint is the product of the factors
        return Ok(0.0);
    }
    let ctx = ContextTable::new(model, state)?;
    let marginals = ctx.all_marginals();
    Ok(tv_joint_vs_factorized_inner(
        &ctx,
        &marginals,
        &ranks,
        model.vocab().size,
    ))
}

fn ranks_of(state: &MaskState, subset: &[Position]) -> Result<Vec<usize>> {
    subset
        .iter()
        .map(|&p| {
            state.rank(p).ok_or_else(|| {
                Error::InvalidConfig(format!("subset position {p} is not masked"))
            })
        })
        .collect()
}

fn tv_joint_vs_factorized_inner(
    ctx: &ContextTable,
    marginals: &[Vec<f64>],
    ranks: &[usize],
    vocab: usize,
) -> f64 {
    let joint = ctx.subset_joint(ranks);
    let k = ranks.len();
    let mut acc = 0.0;
    let mut digits = vec![0usize; k];
    for &j in &joint {
        let q: f64 = digits
            .iter()
            .zip(ranks)
            .map(|(&d, &r)| marginals[r][d])
            .product();
        acc += (j - q).abs();
        // odometer
        for slot in (0..k).rev() {
            digits[slot] += 1;
            if digits[slot] < vocab {
                break;
            }
            digits[slot] = 0;
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

/// Run greedy selection on this context, then measure the joint-vs-product
/// TV over the selected set and evaluate the sub-additivity predicate for
/// every prefix of the pick order by exact expectation over histories.
///
/// Selection may run on exact or predicted dependencies; the assumption
/// flags always use the exact matrix, which is what the guarantee is stated
/// on. Under predicted dependencies the bound holds only approximately and
/// `bound_satisfied` is reported without being asserted anywhere.
pub fn verify_theorem1(
    model: &TabularModel,
    state: &MaskState,
    cfg: &SelectionConfig,
    dep: &DepMode,
    instance_id: u64,
) -> Result<BoundReport> {
    let ctx = ContextTable::new(model, state)?;
    let marginals = ctx.all_marginals();
    let v = model.vocab().size;

    let exact = dependency_matrix_exact(model, state)?;
    let selection_matrix: DependencyMatrix = match dep {
        DepMode::Exact => exact.clone(),
        DepMode::Predicted { weights, features } => {
            let h = crate::predictor::featurize(model, state, features)?;
            crate::predictor::predict_dependency(&h, weights)?
        }
    };
    let top1s: Vec<f64> = marginals
        .iter()
        .map(|d| d.iter().copied().fold(0.0, f64::max))
        .collect();
    let result = greedy_subset_select(&selection_matrix, state.masked(), &top1s, cfg)?;

    let ranks = ranks_of(state, &result.chosen)?;
    let measured = if model.is_independent() {
        0.0
    } else {
        tv_joint_vs_factorized_inner(&ctx, &marginals, &ranks, v)
    };

    // per-prefix assumption: E over histories of the TV induced by the joint
    // reveal, against the sum of pairwise dependencies of the prefix
    let mut prefix_holds = Vec::new();
    for t in 2..=ranks.len() {
        let hist = &ranks[..t - 1];
        let target = ranks[t - 1];
        let mut query: Vec<usize> = hist.to_vec();
        query.push(target);
        let table = ctx.subset_joint(&query);
        let hist_states = table.len() / v;
        let mut lhs = 0.0;
        for h in 0..hist_states {
            let row = &table[h * v..(h + 1) * v];
            let w: f64 = row.iter().sum();
            if w <= 0.0 {
                continue;
            }
            let cond: Vec<f64> = row.iter().map(|x| x / w).collect();
            lhs += w * tv_unchecked(&marginals[target], &cond);
        }
        let rhs: f64 = hist.iter().map(|&j| exact.get(target, j)).sum();
        prefix_holds.push(lhs <= rhs + ASSUMPTION_TOL);
    }
    let assumption_holds = prefix_holds.iter().all(|&b| b);

    Ok(BoundReport {
        instance_id,
        model_id: model.id(),
        tau: cfg.tau,
        gamma: cfg.gamma,
        selected: result.chosen,
        accumulated: result.accumulated,
        measured_tv: measured,
        bound_satisfied: measured <= cfg.tau + BOUND_TOL,
        assumption_prefix_holds: prefix_holds,
        assumption_holds,
    })
}

/// A decode policy whose only randomness is the values drawn at the chosen
/// positions; selection and fast-fill are deterministic functions of the
/// revealed context.
#[derive(Debug, Clone)]
pub struct DecodePolicy {
    pub selector: Selector,
    pub sampler: SamplerConfig,
    pub eos_fill: bool,
}

/// Exact distribution over completed sequences induced by a decode policy,
/// obtained by expanding every sampling branch with its probability. The
/// returned vector indexes sequences lexicographically (position 0 most
/// significant).
pub fn induced_output_distribution(
    model: &TabularModel,
    initial: &MaskState,
    policy: &DecodePolicy,
) -> Result<Vec<f64>> {
    let states = checked_pow(model.vocab().size, model.len(), model.enumeration_cap())?;
    let mut out = vec![0.0; states];
    let history = KlassHistory::new(match &policy.selector {
        Selector::Klass { cfg } => cfg.history_len,
        _ => 0,
    });
    expand_branches(model, initial, policy, &history, 1.0, &mut out)?;
    Ok(out)
}

fn expand_branches(
    model: &TabularModel,
    state: &MaskState,
    policy: &DecodePolicy,
    history: &KlassHistory,
    prob: f64,
    out: &mut [f64],
) -> Result<()> {
    if state.is_complete() {
        let seq = state.sequence().expect("complete state");
        let v = model.vocab().size;
        let mut idx = 0usize;
        for t in seq {
            idx = idx * v + t;
        }
        out[idx] += prob;
        return Ok(());
    }
    let marginals = all_masked_marginals(model, state)?;
    let choice = choose_step(model, state, &marginals, &policy.selector, history)?;
    if choice.positions.is_empty() {
        return Err(Error::NoProgress);
    }
    let transformed: Vec<Vec<f64>> = choice
        .positions
        .iter()
        .map(|&p| {
            let rank = state.rank(p).expect("chosen positions are masked");
            transform_distribution(&marginals[rank], &policy.sampler)
        })
        .collect();
    let k = choice.positions.len();
    let v = model.vocab().size;
    let mut digits = vec![0usize; k];
    loop {
        let p_branch: f64 = digits.iter().zip(&transformed).map(|(&d, t)| t[d]).product();
        if p_branch > 0.0 {
            let mut next = state.reveal_many(
                choice
                    .positions
                    .iter()
                    .zip(&digits)
                    .map(|(&pos, &val)| (pos, val)),
            );
            if policy.eos_fill {
                next = crate::decoding::eos_fill(&next, model.vocab().eos_id).0;
            }
            let mut next_history = history.clone();
            next_history.push_step(state.masked(), &marginals, &next);
            expand_branches(model, &next, policy, &next_history, prob * p_branch, out)?;
        }
        // odometer over the joint assignment
        let mut slot = k;
        loop {
            if slot == 0 {
                return Ok(());
            }
            slot -= 1;
            digits[slot] += 1;
            if digits[slot] < v {
                break;
            }
            digits[slot] = 0;
        }
    }
}

/// One slack measurement: a target position against a jointly revealed
/// subset, comparing the joint TV to the summed single-reveal TVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlackRecord {
    pub instance_id: u64,
    pub model_id: String,
    pub subset_size: usize,
    pub target: Position,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// Protocol settings for the slack experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackExperimentConfig {
    pub n_instances: usize,
    /// Largest subset size drawn (uniform over 1..=max, capped by the mask).
    pub max_subset: usize,
    pub seed: u64,
}

impl Default for SlackExperimentConfig {
    fn default() -> Self {
        Self {
            n_instances: 200,
            max_subset: 6,
            seed: 0,
        }
    }
}

/// Replicate the sub-additivity validation protocol on tabular models: draw
/// a response, mask a random fraction, draw a subset and its realization
/// from the exact conditional, and record lhs/rhs for every target outside
/// the subset. Instances run in parallel; each owns a stream derived from
/// (seed, instance id), so output order and content are deterministic.
pub fn run_slack_experiment(
    models: &[TabularModel],
    cfg: &SlackExperimentConfig,
) -> Result<Vec<SlackRecord>> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("no models given".into()));
    }
    let per_instance: Result<Vec<Vec<SlackRecord>>> = (0..cfg.n_instances as u64)
        .into_par_iter()
        .map(|id| slack_instance(models, cfg, id))
        .collect();
    Ok(per_instance?.into_iter().flatten().collect())
}

fn slack_instance(
    models: &[TabularModel],
    cfg: &SlackExperimentConfig,
    id: u64,
) -> Result<Vec<SlackRecord>> {
    let model = &models[(id as usize) % models.len()];
    let n = model.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let mut rng = seed::derive_rng(cfg.seed, &[0x51ac, id]);
    let response = sample_sequential(
        model,
        &MaskState::fully_masked(n),
        OrderPolicy::LeftToRight,
        &SamplerConfig::identity(),
        &mut rng,
    )?;
    let t: f64 = rng.random();
    let mask_count = ((t * n as f64).ceil() as usize).clamp(2, n);
    let masked = sample_distinct_positions(n, mask_count, &mut rng);
    let state = MaskState::with_revealed(
        n,
        (0..n)
            .filter(|p| !masked.contains(p))
            .map(|p| (p, response[p])),
    )?;
    let subset_max = cfg.max_subset.min(masked.len() - 1).max(1);
    let subset_size = rng.random_range(1..=subset_max);
    let subset_local = sample_distinct_positions(masked.len(), subset_size, &mut rng);
    let subset: Vec<Position> = subset_local.iter().map(|&r| masked[r]).collect();

    // realization drawn from the exact joint conditional of the subset
    let joint = crate::model::joint_conditional(model, &state, &subset)?;
    let draw = sample_index(&joint, &mut rng);
    let v = model.vocab().size;
    let mut realization = vec![0usize; subset.len()];
    let mut rest = draw;
    for slot in realization.iter_mut().rev() {
        *slot = rest % v;
        rest /= v;
    }

    let mut records = Vec::new();
    for &target in &masked {
        if subset.contains(&target) {
            continue;
        }
        let (lhs, rhs) = subadditivity_slack(model, &state, target, &subset, &realization)?;
        records.push(SlackRecord {
            instance_id: id,
            model_id: model.id(),
            subset_size,
            target,
            lhs,
            rhs,
            slack: rhs - lhs,
        });
    }
    Ok(records)
}

fn sample_distinct_positions<R: rand::Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let pick = i + rng.random_range(0..pool.len() - i);
        pool.swap(i, pick);
    }
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Aggregate slack statistics for one subset size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlackSizeSummary {
    pub subset_size: usize,
    pub count: usize,
    pub violation_rate: f64,
    pub mean_slack: f64,
    /// Slack quantiles at 0, 5, 25, 50, 75, 95, and 100 percent.
    pub quantiles: Vec<f64>,
}

/// Per-size empirical CDF summaries; a violation is strictly negative slack.
pub fn summarize_slack(records: &[SlackRecord]) -> Vec<SlackSizeSummary> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.subset_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|size| {
            let mut slacks: Vec<f64> = records
                .iter()
                .filter(|r| r.subset_size == size)
                .map(|r| r.slack)
                .collect();
            slacks.sort_by(|a, b| a.partial_cmp(b).expect("finite slack"));
            let count = slacks.len();
            let violations = slacks.iter().filter(|&&s| s < 0.0).count();
            let mean = slacks.iter().sum::<f64>() / count as f64;
            let quantiles = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0]
                .iter()
                .map(|&q| {
                    let idx = ((count - 1) as f64 * q).round() as usize;
                    slacks[idx]
                })
                .collect();
            SlackSizeSummary {
                subset_size: size,
                count,
                violation_rate: violations as f64 / count as f64,
                mean_slack: mean,
                quantiles,
            }
        })
        .collect()
}

/// A randomly generated verification instance: a model plus a context whose
/// revealed values were drawn from the model, so the context always has
/// positive probability.
pub struct RandomInstance {
    pub model: TabularModel,
    pub state: MaskState,
}

/// Deterministic instance generator over a mix of task families.
pub fn random_instance(
    seed: u64,
    id: u64,
    max_vocab: usize,
    max_len: usize,
) -> Result<RandomInstance> {
    let mut rng = seed::derive_rng(seed, &[0x1257, id]);
    let kind = match rng.random_range(0..9u32) {
        0..=3 => TaskKind::DenseRandom,
        4..=5 => TaskKind::Markov,
        6 => TaskKind::Copy,
        7 => TaskKind::ArithmeticMod,
        _ => TaskKind::Independent,
    };
    let v = rng.random_range(2..=max_vocab.max(2));
    let n = rng.random_range(2..=max_len.max(2));
    let vocab = VocabSpec::new(v, v - 1)?;
    let model = make_task_model_for_prompt(kind, vocab, n, seed ^ id, rng.random_range(0..4))?;
    let response = sample_sequential(
        &model,
        &MaskState::fully_masked(n),
        OrderPolicy::LeftToRight,
        &SamplerConfig::identity(),
        &mut rng,
    )?;
    let t: f64 = rng.random();
    let mask_count = ((t * n as f64).ceil() as usize).clamp(1, n);
    let masked = sample_distinct_positions(n, mask_count, &mut rng);
    let state = MaskState::with_revealed(
        n,
        (0..n)
            .filter(|p| !masked.contains(p))
            .map(|p| (p, response[p])),
    )?;
    Ok(RandomInstance { model, state })
}

/// Settings for the randomized bound-verification suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSuiteConfig {
    pub n_instances: usize,
    pub seed: u64,
    pub max_vocab: usize,
    pub max_len: usize,
    pub taus: Vec<f64>,
    pub gammas: Vec<f64>,
}

/// Run the bound verification over randomized instances with exact
/// dependencies, one derived rng stream per instance, in parallel.
pub fn run_theorem_suite(cfg: &TheoremSuiteConfig) -> Result<Vec<BoundReport>> {
    if cfg.taus.is_empty() || cfg.gammas.is_empty() {
        return Err(Error::InvalidConfig("tau and gamma grids must be nonempty".into()));
    }
    (0..cfg.n_instances as u64)
        .into_par_iter()
        .map(|id| {
            let inst = random_instance(cfg.seed, id, cfg.max_vocab, cfg.max_len)?;
            let mut rng = seed::derive_rng(cfg.seed, &[0x7e0, id]);
            let tau = cfg.taus[rng.random_range(0..cfg.taus.len())];
            let gamma = cfg.gammas[rng.random_range(0..cfg.gammas.len())];
            verify_theorem1(
                &inst.model,
                &inst.state,
                &SelectionConfig::new(tau, gamma)?,
                &DepMode::Exact,
                id,
            )
        })
        .collect()
}

/// Write any serializable records as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read line-delimited JSON records.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
