//! Exactly computable tabular sequence models.
//!
//! These small joint distributions stand in for a masked-diffusion backbone:
//! a "forward pass" asks for the conditional distribution of masked positions
//! given the revealed ones, and here every such query is answered by exact
//! summation over the joint rather than by a neural approximation. All other
//! modules treat this one as ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{sample_index, transform_distribution, SamplerConfig};
use crate::seed;

pub type Token = usize;
pub type Position = usize;

/// Default cap on exact enumeration (number of joint states).
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Vocabulary description. The mask sentinel is positional (a position is
/// either revealed or masked), never a token value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub eos_id: Token,
}

impl VocabSpec {
    pub fn new(size: usize, eos_id: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab size must be >= 2, got {size}"
            )));
        }
        if eos_id >= size {
            return Err(Error::InvalidConfig(format!(
                "eos_id {eos_id} out of range for vocab size {size}"
            )));
        }
        Ok(Self { size, eos_id })
    }
}

/// Task families with exactly representable joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Product of independent per-position factors.
    Independent,
    /// First-order chain with a sticky EOS state: after an EOS the next
    /// token is EOS with high probability but every transition keeps full
    /// support, the way a softmax backbone behaves. Full support keeps all
    /// contexts reachable, including the inconsistent ones that parallel
    /// co-sampling can produce.
    Markov,
    /// Uniform over the constant sequences: every position copies the first.
    Copy,
    /// Uniform over sequences whose last token equals the sum of all earlier
    /// tokens plus the prompt offset, modulo the vocab size.
    ArithmeticMod,
    /// Fully random dense joint with a spikiness ("concentration") knob.
    DenseRandom,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Independent => "independent",
            TaskKind::Markov => "markov",
            TaskKind::Copy => "copy",
            TaskKind::ArithmeticMod => "arithmetic-mod",
            TaskKind::DenseRandom => "dense-random",
        };
        f.write_str(s)
    }
}

/// Internal joint representation: dense table or structured generator.
#[derive(Debug, Clone, PartialEq)]
enum Joint {
    /// Mass per sequence, lexicographic order, position 0 most significant.
    Dense(Vec<f64>),
    /// One factor per position.
    Independent(Vec<Vec<f64>>),
    /// First-order chain.
    Markov { init: Vec<f64>, trans: Vec<Vec<f64>> },
    Copy,
    ArithmeticMod { offset: Token },
}

/// An exact joint distribution over length-N token sequences, selected by a
/// prompt identifier. Immutable after construction; all queries are
/// read-only and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    vocab: VocabSpec,
    length: usize,
    prompt_id: u64,
    kind: TaskKind,
    seed: u64,
    concentration: f64,
    enumeration_cap: u64,
    joint: Joint,
}

impl TabularModel {
    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn prompt_id(&self) -> u64 {
        self.prompt_id
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn enumeration_cap(&self) -> u64 {
        self.enumeration_cap
    }

    /// Stable identifier used in cache records and reports.
    pub fn id(&self) -> String {
        format!(
            "{}-v{}n{}-s{}-p{}",
            self.kind, self.vocab.size, self.length, self.seed, self.prompt_id
        )
    }

    pub fn is_independent(&self) -> bool {
        matches!(self.joint, Joint::Independent(_))
    }

    /// Per-position factors, when the joint is an independent product.
    pub(crate) fn factors(&self) -> Option<&[Vec<f64>]> {
        match &self.joint {
            Joint::Independent(f) => Some(f),
            _ => None,
        }
    }

    /// Probability mass of one complete sequence.
    pub fn mass(&self, seq: &[Token]) -> f64 {
        debug_assert_eq!(seq.len(), self.length);
        let v = self.vocab.size;
        match &self.joint {
            Joint::Dense(table) => {
                let mut idx = 0usize;
                for &t in seq {
                    idx = idx * v + t;
                }
                table[idx]
            }
            Joint::Independent(factors) => seq
                .iter()
                .zip(factors)
                .map(|(&t, f)| f[t])
                .product(),
            Joint::Markov { init, trans } => {
                let mut p = init[seq[0]];
                for w in seq.windows(2) {
                    p *= trans[w[0]][w[1]];
                }
                p
            }
            Joint::Copy => {
                if seq.iter().all(|&t| t == seq[0]) {
                    1.0 / v as f64
                } else {
                    0.0
                }
            }
            Joint::ArithmeticMod { offset } => {
                let sum: usize = seq[..self.length - 1].iter().sum();
                if seq[self.length - 1] == (offset + sum) % v {
                    1.0 / (v as f64).powi(self.length as i32 - 1)
                } else {
                    0.0
                }
            }
        }
    }

    /// Materialize the full joint as a dense table (lexicographic order).
    pub fn dense_joint(&self) -> Result<Vec<f64>> {
        let states = checked_pow(self.vocab.size, self.length, self.enumeration_cap)?;
        if let Joint::Dense(table) = &self.joint {
            return Ok(table.clone());
        }
        let mut out = vec![0.0; states];
        let mut seq = vec![0usize; self.length];
        for (idx, slot) in out.iter_mut().enumerate() {
            decode_index(idx, self.vocab.size, &mut seq);
            *slot = self.mass(&seq);
        }
        Ok(out)
    }
}

/// Number of states `base^exp`, or an error when it exceeds `cap`.
pub(crate) fn checked_pow(base: usize, exp: usize, cap: u64) -> Result<usize> {
    let mut n: u128 = 1;
    for _ in 0..exp {
        n *= base as u128;
        if n > cap as u128 {
            return Err(Error::EnumerationCapExceeded {
                needed: n,
                cap: cap as u128,
            });
        }
    }
    Ok(n as usize)
}

/// Write the digits of `idx` (base `v`, most significant first) into `seq`.
fn decode_index(idx: usize, v: usize, seq: &mut [usize]) {
    let mut rest = idx;
    for slot in seq.iter_mut().rev() {
        *slot = rest % v;
        rest /= v;
    }
}

/// Decoding context: which positions are revealed (with their values) and
/// which are still masked. Masked positions are kept sorted ascending; the
/// rank of a position in that ordering is its row/column index in a
/// dependency matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    length: usize,
    revealed: BTreeMap<Position, Token>,
    masked: Vec<Position>,
}

impl MaskState {
    /// Fully masked state over `length` positions.
    pub fn fully_masked(length: usize) -> Self {
        Self {
            length,
            revealed: BTreeMap::new(),
            masked: (0..length).collect(),
        }
    }

    /// State with the given positions revealed; all others masked.
    pub fn with_revealed(
        length: usize,
        revealed: impl IntoIterator<Item = (Position, Token)>,
    ) -> Result<Self> {
        let revealed: BTreeMap<Position, Token> = revealed.into_iter().collect();
        if let Some((&p, _)) = revealed.iter().next_back() {
            if p >= length {
                return Err(Error::InvalidConfig(format!(
                    "revealed position {p} out of range for length {length}"
                )));
            }
        }
        let masked = (0..length).filter(|p| !revealed.contains_key(p)).collect();
        Ok(Self {
            length,
            revealed,
            masked,
        })
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn revealed(&self) -> &BTreeMap<Position, Token> {
        &self.revealed
    }

    /// Masked positions, ascending.
    pub fn masked(&self) -> &[Position] {
        &self.masked
    }

    pub fn is_masked(&self, pos: Position) -> bool {
        self.masked.binary_search(&pos).is_ok()
    }

    pub fn is_complete(&self) -> bool {
        self.masked.is_empty()
    }

    /// Rank of a masked position in the ascending masked ordering.
    pub fn rank(&self, pos: Position) -> Option<usize> {
        self.masked.binary_search(&pos).ok()
    }

    /// New state with one more position revealed.
    pub fn reveal(&self, pos: Position, value: Token) -> Self {
        self.reveal_many([(pos, value)])
    }

    /// New state with several more positions revealed.
    pub fn reveal_many(&self, items: impl IntoIterator<Item = (Position, Token)>) -> Self {
        let mut revealed = self.revealed.clone();
        for (p, v) in items {
            debug_assert!(self.is_masked(p), "reveal of non-masked position {p}");
            revealed.insert(p, v);
        }
        let masked = (0..self.length)
            .filter(|p| !revealed.contains_key(p))
            .collect();
        Self {
            length: self.length,
            revealed,
            masked,
        }
    }

    /// The complete sequence, when nothing is masked.
    pub fn sequence(&self) -> Option<Vec<Token>> {
        if !self.is_complete() {
            return None;
        }
        Some(self.revealed.values().copied().collect())
    }
}

/// Iterate over every assignment of `positions` in `scratch`, most
/// significant digit first. `scratch` must already hold the revealed values.
fn for_each_assignment(
    scratch: &mut [Token],
    positions: &[Position],
    vocab: usize,
    mut f: impl FnMut(&[Token]),
) {
    let k = positions.len();
    if k == 0 {
        f(scratch);
        return;
    }
    for p in positions {
        scratch[*p] = 0;
    }
    loop {
        f(scratch);
        // odometer increment, least significant digit last
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            let p = positions[i];
            scratch[p] += 1;
            if scratch[p] < vocab {
                break;
            }
            scratch[p] = 0;
        }
    }
}

fn scratch_from_state(state: &MaskState) -> Vec<Token> {
    let mut seq = vec![0usize; state.len()];
    for (&p, &v) in state.revealed() {
        seq[p] = v;
    }
    seq
}

/// Unnormalized mass table over all assignments to the masked positions
/// (lexicographic in masked order), plus the total. Errors when the context
/// itself has zero mass or the enumeration exceeds the cap.
pub(crate) fn masked_mass_table(model: &TabularModel, state: &MaskState) -> Result<Vec<f64>> {
    let m = state.masked().len();
    let states = checked_pow(model.vocab().size, m, model.enumeration_cap())?;
    let mut table = vec![0.0; states];
    let mut scratch = scratch_from_state(state);
    let mut idx = 0usize;
    for_each_assignment(&mut scratch, state.masked(), model.vocab().size, |seq| {
        table[idx] = model.mass(seq);
        idx += 1;
    });
    let total: f64 = table.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext);
    }
    for x in &mut table {
        *x /= total;
    }
    Ok(table)
}

/// P(Y_target | revealed context), by exact summation over all assignments
/// to the other masked positions.
pub fn conditional_marginal(
    model: &TabularModel,
    state: &MaskState,
    target: Position,
) -> Result<Vec<f64>> {
    let Some(_) = state.rank(target) else {
        return Err(Error::InvalidConfig(format!(
            "target position {target} is not masked"
        )));
    };
    // Independent product: conditioning is vacuous, return the factor as-is.
    if let Some(factors) = model.factors() {
        return Ok(factors[target].clone());
    }
    let v = model.vocab().size;
    checked_pow(v, state.masked().len(), model.enumeration_cap())?;
    let mut acc = vec![0.0; v];
    let mut scratch = scratch_from_state(state);
    for_each_assignment(&mut scratch, state.masked(), v, |seq| {
        acc[seq[target]] += model.mass(seq);
    });
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext);
    }
    for x in &mut acc {
        *x /= total;
    }
    Ok(acc)
}

/// Exact joint of a subset of masked positions given the revealed context,
/// marginalizing out the remaining masked positions. The returned vector is
/// indexed lexicographically in the order `subset` is given (first listed
/// position is the most significant digit).
pub fn joint_conditional(
    model: &TabularModel,
    state: &MaskState,
    subset: &[Position],
) -> Result<Vec<f64>> {
    for &p in subset {
        if state.rank(p).is_none() {
            return Err(Error::InvalidConfig(format!(
                "subset position {p} is not masked"
            )));
        }
    }
    let v = model.vocab().size;
    let out_states = checked_pow(v, subset.len(), model.enumeration_cap())?;
    checked_pow(v, state.masked().len(), model.enumeration_cap())?;
    let mut acc = vec![0.0; out_states];
    let mut scratch = scratch_from_state(state);
    for_each_assignment(&mut scratch, state.masked(), v, |seq| {
        let mut idx = 0usize;
        for &p in subset {
            idx = idx * v + seq[p];
        }
        acc[idx] += model.mass(seq);
    });
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext);
    }
    for x in &mut acc {
        *x /= total;
    }
    Ok(acc)
}

/// Conditional marginals for every masked position, in masked order, from a
/// single enumeration pass (the tabular analogue of one forward pass).
pub fn all_masked_marginals(model: &TabularModel, state: &MaskState) -> Result<Vec<Vec<f64>>> {
    let masked = state.masked();
    if let Some(factors) = model.factors() {
        return Ok(masked.iter().map(|&p| factors[p].clone()).collect());
    }
    let v = model.vocab().size;
    checked_pow(v, masked.len(), model.enumeration_cap())?;
    let mut acc = vec![vec![0.0; v]; masked.len()];
    let mut scratch = scratch_from_state(state);
    let mut total = 0.0;
    for_each_assignment(&mut scratch, masked, v, |seq| {
        let p = model.mass(seq);
        if p == 0.0 {
            return;
        }
        total += p;
        for (row, &pos) in acc.iter_mut().zip(masked) {
            row[seq[pos]] += p;
        }
    });
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityContext);
    }
    for row in &mut acc {
        for x in row {
            *x /= total;
        }
    }
    Ok(acc)
}

/// Order in which a reference sequential sampler visits positions. Both
/// policies depend only on revealed information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    LeftToRight,
    /// Lowest conditional entropy first; ties to the lowest index.
    EntropyAscending,
}

/// Reference sequential sampler: one position per step, each drawn from its
/// exact conditional (after the sampling transform). With the identity
/// transform the induced output distribution equals the model joint
/// restricted to the context.
pub fn sample_sequential<R: Rng>(
    model: &TabularModel,
    state: &MaskState,
    order: OrderPolicy,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Token>> {
    let mut state = state.clone();
    while !state.is_complete() {
        let next = match order {
            OrderPolicy::LeftToRight => state.masked()[0],
            OrderPolicy::EntropyAscending => {
                let marginals = all_masked_marginals(model, &state)?;
                let mut best = (f64::INFINITY, usize::MAX);
                for (row, &pos) in marginals.iter().zip(state.masked()) {
                    let h = crate::sampling::entropy(row);
                    if h < best.0 || (h == best.0 && pos < best.1) {
                        best = (h, pos);
                    }
                }
                best.1
            }
        };
        let dist = conditional_marginal(model, &state, next)?;
        let dist = transform_distribution(&dist, sampler);
        let value = sample_index(&dist, rng);
        state = state.reveal(next, value);
    }
    Ok(state.sequence().expect("state is complete"))
}

/// Serializable model description; `build` reproduces the model bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub eos_id: Token,
    pub length: usize,
    pub seed: u64,
    #[serde(default)]
    pub prompt_id: u64,
    /// Spikiness of the dense-random joint; larger is flatter. Ignored by
    /// the other kinds.
    #[serde(default)]
    pub concentration: Option<f64>,
    #[serde(default)]
    pub enumeration_cap: Option<u64>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<TabularModel> {
        let vocab = VocabSpec::new(self.vocab_size, self.eos_id)?;
        build_model(
            self.kind,
            vocab,
            self.length,
            self.seed,
            self.prompt_id,
            self.concentration.unwrap_or(1.0),
            self.enumeration_cap.unwrap_or(DEFAULT_ENUMERATION_CAP),
        )
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_path(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Build a task model with prompt 0. Deterministic in the seed.
pub fn make_task_model(
    kind: TaskKind,
    vocab: VocabSpec,
    length: usize,
    seed: u64,
) -> Result<TabularModel> {
    make_task_model_for_prompt(kind, vocab, length, seed, 0)
}

/// Build one member of a prompt family. Prompts select distinct joint
/// tables: the random kinds reseed per prompt, and the arithmetic kind uses
/// the prompt as the additive offset (the given operand of the task).
pub fn make_task_model_for_prompt(
    kind: TaskKind,
    vocab: VocabSpec,
    length: usize,
    seed: u64,
    prompt_id: u64,
) -> Result<TabularModel> {
    build_model(
        kind,
        vocab,
        length,
        seed,
        prompt_id,
        1.0,
        DEFAULT_ENUMERATION_CAP,
    )
}

fn build_model(
    kind: TaskKind,
    vocab: VocabSpec,
    length: usize,
    seed: u64,
    prompt_id: u64,
    concentration: f64,
    cap: u64,
) -> Result<TabularModel> {
    if length == 0 {
        return Err(Error::InvalidConfig("length must be positive".into()));
    }
    if concentration.is_nan() || concentration <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let v = vocab.size;
    let mut rng = seed::derive_rng(seed, &[kind as u64, v as u64, length as u64, prompt_id]);
    let joint = match kind {
        TaskKind::Independent => {
            let factors = (0..length).map(|_| random_simplex(v, &mut rng)).collect();
            Joint::Independent(factors)
        }
        TaskKind::Markov => {
            let init = random_simplex(v, &mut rng);
            let mut trans: Vec<Vec<f64>> = (0..v).map(|_| random_simplex(v, &mut rng)).collect();
            // sticky EOS, mass 0.95 on the self-loop with the rest spread
            for (tok, x) in trans[vocab.eos_id].iter_mut().enumerate() {
                *x = 0.05 * *x + if tok == vocab.eos_id { 0.95 } else { 0.0 };
            }
            Joint::Markov { init, trans }
        }
        TaskKind::Copy => Joint::Copy,
        TaskKind::ArithmeticMod => Joint::ArithmeticMod {
            offset: (prompt_id as usize) % v,
        },
        TaskKind::DenseRandom => {
            let states = checked_pow(v, length, cap)?;
            let mut table: Vec<f64> = (0..states)
                .map(|_| {
                    let e = -f64::ln(1.0 - rng.random::<f64>());
                    e.powf(1.0 / concentration)
                })
                .collect();
            let total: f64 = table.iter().sum();
            for x in &mut table {
                *x /= total;
            }
            Joint::Dense(table)
        }
    };
    Ok(TabularModel {
        vocab,
        length,
        prompt_id,
        kind,
        seed,
        concentration,
        enumeration_cap: cap,
        joint,
    })
}

/// Positive random point on the simplex (normalized unit exponentials).
fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n)
        .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
        .collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}
