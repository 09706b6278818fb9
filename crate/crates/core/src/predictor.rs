//! Learned pairwise dependency predictor.
//!
//! A bilinear sigmoid scorer over per-position feature rows: queries and keys
//! are linear projections of the features, the score for a pair is the scaled
//! dot product squashed into the unit interval. Training targets are the cached
//! single-realization TV columns from phase-one generation, so the MSE
//! optimum for a pair is the conditional mean, i.e. the exact expected
//! dependency.
//!
//! The featurizer stands in for backbone hidden states: in the tabular
//! setting the conditional marginal of a position together with its index
//! and the revealed pattern determine the exact dependency values, so the
//! regression problem is well posed.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    all_masked_marginals, MaskState, OrderPolicy, Position, TabularModel, Token,
};
use crate::sampling::{sample_index, SamplerConfig};
use crate::seed;
use crate::tv::{ContextTable, DepSource, DependencyMatrix, PairStats};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which feature blocks are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFlags {
    /// Conditional marginal of the position (vocab-size entries).
    pub marginal: bool,
    /// One-hot of the absolute position (length entries).
    pub position_one_hot: bool,
    /// Bitmap of revealed positions (length entries), shared across rows.
    pub revealed_pattern: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        Self {
            marginal: true,
            position_one_hot: true,
            revealed_pattern: true,
        }
    }
}

/// Featurizer shape: the feature dimension is the sum of the enabled
/// component widths for a given vocab size and sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub vocab_size: usize,
    pub length: usize,
    pub components: ComponentFlags,
}

impl FeatureConfig {
    pub fn new(vocab_size: usize, length: usize, components: ComponentFlags) -> Result<Self> {
        let cfg = Self {
            vocab_size,
            length,
            components,
        };
        if cfg.d() == 0 {
            return Err(Error::InvalidConfig(
                "at least one feature component must be enabled".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn full(vocab_size: usize, length: usize) -> Self {
        Self {
            vocab_size,
            length,
            components: ComponentFlags::default(),
        }
    }

    /// Feature dimension: sum of enabled component widths.
    pub fn d(&self) -> usize {
        let mut d = 0;
        if self.components.marginal {
            d += self.vocab_size;
        }
        if self.components.position_one_hot {
            d += self.length;
        }
        if self.components.revealed_pattern {
            d += self.length;
        }
        d
    }
}

/// Per-masked-position feature rows, |M| x d row-major, tagged with the
/// masked ordering the rows correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub order: Vec<Position>,
    pub d: usize,
    pub rows: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Deterministic feature rows for every masked position of `state`.
pub fn featurize(
    model: &TabularModel,
    state: &MaskState,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix> {
    if cfg.vocab_size != model.vocab().size || cfg.length != model.len() {
        return Err(Error::InvalidConfig(format!(
            "feature config shaped for vocab {} length {}, model has vocab {} length {}",
            cfg.vocab_size,
            cfg.length,
            model.vocab().size,
            model.len()
        )));
    }
    let d = cfg.d();
    let masked = state.masked();
    let marginals = all_masked_marginals(model, state)?;
    let mut rows = Vec::with_capacity(masked.len() * d);
    for (rank, &pos) in masked.iter().enumerate() {
        if cfg.components.marginal {
            rows.extend_from_slice(&marginals[rank]);
        }
        if cfg.components.position_one_hot {
            for p in 0..cfg.length {
                rows.push(if p == pos { 1.0 } else { 0.0 });
            }
        }
        if cfg.components.revealed_pattern {
            for p in 0..cfg.length {
                rows.push(if state.revealed().contains_key(&p) {
                    1.0
                } else {
                    0.0
                });
            }
        }
    }
    Ok(FeatureMatrix {
        order: masked.to_vec(),
        d,
        rows,
    })
}

/// Projection matrices of the bilinear scorer, with the optional merged form
/// W = W_Q W_K^T used at inference to fold two projections into one.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    d: usize,
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    merged: Option<Vec<f64>>,
}

impl PredictorWeights {
    pub fn from_parts(d: usize, w_q: Vec<f64>, w_k: Vec<f64>) -> Result<Self> {
        if w_q.len() != d * d || w_k.len() != d * d {
            return Err(Error::DimensionMismatch {
                what: "predictor projection matrices",
                expected: d * d,
                got: w_q.len().max(w_k.len()),
            });
        }
        Ok(Self {
            d,
            w_q,
            w_k,
            merged: None,
        })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            w_q: vec![0.0; d * d],
            w_k: vec![0.0; d * d],
            merged: None,
        }
    }

    /// Uniform(-scale, scale) initialization. Zero init is a saddle point of
    /// the bilinear objective, so training always starts from random weights.
    pub fn random<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || -> Vec<f64> {
            (0..d * d)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect()
        };
        let w_q = draw();
        let w_k = draw();
        Self {
            d,
            w_q,
            w_k,
            merged: None,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn w_q(&self) -> &[f64] {
        &self.w_q
    }

    pub fn w_k(&self) -> &[f64] {
        &self.w_k
    }

    pub fn merged(&self) -> Option<&[f64]> {
        self.merged.as_deref()
    }

    /// Compute and store W = W_Q W_K^T.
    pub fn merge(&mut self) {
        let d = self.d;
        let mut w = vec![0.0; d * d];
        // w[a][b] = sum_c w_q[a][c] * w_k[b][c]
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += self.w_q[a * d + c] * self.w_k[b * d + c];
                }
                w[a * d + b] = acc;
            }
        }
        self.merged = Some(w);
    }

    /// Check the stored merged matrix against W_Q W_K^T.
    pub fn validate_merged(&self) -> Result<()> {
        let Some(merged) = &self.merged else {
            return Ok(());
        };
        let mut fresh = self.clone();
        fresh.merge();
        let reference = fresh.merged.unwrap();
        let ok = merged
            .iter()
            .zip(&reference)
            .all(|(a, b)| (a - b).abs() <= 1e-6);
        if !ok {
            return Err(Error::InvalidConfig(
                "stored merged matrix deviates from W_Q W_K^T by more than 1e-6".into(),
            ));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Raw bilinear scores z_ij = q_i . k_j / sqrt(d) for every ordered pair.
/// Uses the merged matrix when present.
fn score_matrix(h: &FeatureMatrix, weights: &PredictorWeights) -> Result<Vec<f64>> {
    if h.d != weights.d {
        return Err(Error::DimensionMismatch {
            what: "feature dimension vs predictor weights",
            expected: weights.d,
            got: h.d,
        });
    }
    let m = h.len();
    let d = h.d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut z = vec![0.0; m * m];
    if let Some(w) = weights.merged() {
        // g_i = h_i W, then z_ij = g_i . h_j
        let mut g = vec![0.0; m * d];
        for i in 0..m {
            let hi = h.row(i);
            for b in 0..d {
                let mut acc = 0.0;
                for a in 0..d {
                    acc += hi[a] * w[a * d + b];
                }
                g[i * d + b] = acc;
            }
        }
        for i in 0..m {
            for j in 0..m {
                let hj = h.row(j);
                let mut acc = 0.0;
                for b in 0..d {
                    acc += g[i * d + b] * hj[b];
                }
                z[i * m + j] = acc * scale;
            }
        }
    } else {
        let (q, k) = project(h, weights);
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += q[i * d + c] * k[j * d + c];
                }
                z[i * m + j] = acc * scale;
            }
        }
    }
    Ok(z)
}

/// Q = H W_Q and K = H W_K, both |M| x d row-major.
fn project(h: &FeatureMatrix, weights: &PredictorWeights) -> (Vec<f64>, Vec<f64>) {
    let m = h.len();
    let d = h.d;
    let mut q = vec![0.0; m * d];
    let mut k = vec![0.0; m * d];
    for i in 0..m {
        let hi = h.row(i);
        for b in 0..d {
            let mut aq = 0.0;
            let mut ak = 0.0;
            for (a, &hia) in hi.iter().enumerate() {
                aq += hia * weights.w_q[a * d + b];
                ak += hia * weights.w_k[a * d + b];
            }
            q[i * d + b] = aq;
            k[i * d + b] = ak;
        }
    }
    (q, k)
}

/// Predicted dependency matrix: sigmoid of the scaled bilinear scores with a
/// zeroed diagonal.
pub fn predict_dependency(
    h: &FeatureMatrix,
    weights: &PredictorWeights,
) -> Result<DependencyMatrix> {
    let m = h.len();
    let z = score_matrix(h, weights)?;
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                values[i * m + j] = sigmoid(z[i * m + j]);
            }
        }
    }
    DependencyMatrix::new(h.order.clone(), values, DepSource::Predicted)
}

/// One phase-one record: a masked context, the realized reveal of one masked
/// position, and the per-realization TV column for every other position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TVCacheRecord {
    pub model_id: String,
    /// Mask ratio drawn for this sample.
    pub t: f64,
    pub masked: Vec<Position>,
    pub revealed: Vec<(Position, Token)>,
    /// Revealed position (global index) and its sampled value.
    pub j: Position,
    pub y: Token,
    /// Column of TV values in masked order; exactly 0 at the rank of `j`.
    pub d_column: Vec<f64>,
    /// Stream seed of the sample that produced this record; together with
    /// `model_id` it regenerates the features, so H itself is not stored.
    pub feature_seed: u64,
}

impl TVCacheRecord {
    pub fn state(&self) -> Result<MaskState> {
        let length = self.masked.len() + self.revealed.len();
        MaskState::with_revealed(length, self.revealed.iter().copied())
    }
}

/// Cache generation settings. The per-response sample count defaults to 5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheGenConfig {
    pub responses_per_model: usize,
    pub samples_per_response: usize,
    pub seed: u64,
}

impl Default for CacheGenConfig {
    fn default() -> Self {
        Self {
            responses_per_model: 100,
            samples_per_response: 5,
            seed: 0,
        }
    }
}

/// Phase one: draw responses from each model, mask a random fraction, and
/// for every masked position emit the TV column of one sampled realization.
/// Deterministic in the seed.
pub fn generate_tv_cache(
    models: &[TabularModel],
    cfg: &CacheGenConfig,
) -> Result<Vec<TVCacheRecord>> {
    let mut out = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        let n = model.len();
        for resp in 0..cfg.responses_per_model {
            let mut rng = seed::derive_rng(cfg.seed, &[mi as u64, resp as u64]);
            let response = crate::model::sample_sequential(
                model,
                &MaskState::fully_masked(n),
                OrderPolicy::LeftToRight,
                &SamplerConfig::identity(),
                &mut rng,
            )?;
            for samp in 0..cfg.samples_per_response {
                let stream = seed::derive_seed(cfg.seed, &[mi as u64, resp as u64, samp as u64]);
                let mut rng = seed::seeded_rng(stream);
                let t: f64 = rng.random();
                let mask_count = (t * n as f64).ceil() as usize;
                if mask_count == 0 {
                    continue;
                }
                let masked = sample_distinct(n, mask_count, &mut rng);
                let state = MaskState::with_revealed(
                    n,
                    (0..n)
                        .filter(|p| !masked.contains(p))
                        .map(|p| (p, response[p])),
                )?;
                debug_assert_eq!(state.masked(), &masked[..]);
                out.extend(sample_columns(model, &state, t, stream, &mut rng)?);
            }
        }
    }
    Ok(out)
}

/// All masked positions' columns for one context: sample a realization for
/// each position j in turn and record the TV of every other position against
/// that reveal.
fn sample_columns<R: Rng>(
    model: &TabularModel,
    state: &MaskState,
    t: f64,
    stream: u64,
    rng: &mut R,
) -> Result<Vec<TVCacheRecord>> {
    let masked = state.masked();
    let k = masked.len();
    let revealed: Vec<(Position, Token)> =
        state.revealed().iter().map(|(&p, &v)| (p, v)).collect();
    let mut out = Vec::with_capacity(k);
    if model.is_independent() {
        // every dependency vanishes; sample realizations only to keep the
        // rng stream layout identical across kinds
        let marginals = all_masked_marginals(model, state)?;
        for (rank, &j) in masked.iter().enumerate() {
            let y = sample_index(&marginals[rank], rng);
            out.push(TVCacheRecord {
                model_id: model.id(),
                t,
                masked: masked.to_vec(),
                revealed: revealed.clone(),
                j,
                y,
                d_column: vec![0.0; k],
                feature_seed: stream,
            });
        }
        return Ok(out);
    }
    let ctx = ContextTable::new(model, state)?;
    let stats = PairStats::new(&ctx);
    for (rank, &j) in masked.iter().enumerate() {
        let y = sample_index(&stats.marginals[rank], rng);
        let mut column = vec![0.0; k];
        for (i, c) in column.iter_mut().enumerate() {
            if i != rank {
                *c = stats.dep_sample(i, rank, y);
            }
        }
        out.push(TVCacheRecord {
            model_id: model.id(),
            t,
            masked: masked.to_vec(),
            revealed: revealed.clone(),
            j,
            y,
            d_column: column,
            feature_seed: stream,
        });
    }
    Ok(out)
}

/// `count` distinct positions out of `0..n`, sorted ascending.
fn sample_distinct<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(count <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let pick = i + rng.random_range(0..pool.len() - i);
        pool.swap(i, pick);
    }
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Write records as line-delimited JSON.
pub fn write_cache_jsonl(records: &[TVCacheRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache_jsonl(path: &Path) -> Result<Vec<TVCacheRecord>> {
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

/// One training example: feature rows for the context, the column rank that
/// was revealed, and the target TV values (diagonal slot ignored).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: FeatureMatrix,
    pub column_rank: usize,
    pub targets: Vec<f64>,
}

/// Materialize training examples by regenerating features from the models
/// the records were produced on.
pub fn examples_from_cache(
    records: &[TVCacheRecord],
    registry: &HashMap<String, TabularModel>,
    cfg: &FeatureConfig,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let model = registry.get(&r.model_id).ok_or_else(|| {
            Error::InvalidConfig(format!("cache references unknown model {}", r.model_id))
        })?;
        let state = r.state()?;
        let features = featurize(model, &state, cfg)?;
        let rank = state.rank(r.j).ok_or_else(|| {
            Error::InvalidConfig(format!("record column position {} is not masked", r.j))
        })?;
        if r.d_column.len() != features.len() {
            return Err(Error::DimensionMismatch {
                what: "cache column length vs masked count",
                expected: features.len(),
                got: r.d_column.len(),
            });
        }
        out.push(TrainExample {
            features,
            column_rank: rank,
            targets: r.d_column.clone(),
        });
    }
    Ok(out)
}

/// Optimizer and schedule settings: decoupled weight decay with a cosine
/// learning-rate schedule and linear warmup over the first fraction of
/// steps. The desk-scale default learning rate is deliberately larger than
/// the full-scale value (1e-5) so small synthetic caches converge; override
/// it in config when mirroring the original schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub val_fraction: f64,
    pub init_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 0.01,
            epochs: 50,
            batch_size: 32,
            warmup_frac: 0.05,
            val_fraction: 0.1,
            init_scale: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Loss curves and the best-validation checkpoint bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub epoch_val_mae: Vec<f64>,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

/// Batch-averaged squared error over off-diagonal pairs: the sum of squared
/// errors across all (i, column) pairs divided by the number of such pairs.
pub fn batch_loss(examples: &[TrainExample], weights: &PredictorWeights) -> Result<f64> {
    batch_error(examples, weights, |e| e * e)
}

/// Mean absolute error over the same pairs, for held-out tracking.
pub fn batch_mae(examples: &[TrainExample], weights: &PredictorWeights) -> Result<f64> {
    batch_error(examples, weights, f64::abs)
}

fn batch_error(
    examples: &[TrainExample],
    weights: &PredictorWeights,
    penalty: impl Fn(f64) -> f64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let z = score_matrix(&ex.features, weights)?;
        let m = ex.features.len();
        let j = ex.column_rank;
        for i in 0..m {
            if i == j {
                continue;
            }
            let err = sigmoid(z[i * m + j]) - ex.targets[i];
            sum += penalty(err);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Analytic gradients of `batch_loss` with respect to W_Q and W_K, plus the
/// loss value. The merged matrix is ignored: training always runs on the
/// factorized projections.
pub fn batch_gradients(
    examples: &[TrainExample],
    weights: &PredictorWeights,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let d = weights.d;
    let mut grad_q = vec![0.0; d * d];
    let mut grad_k = vec![0.0; d * d];
    let mut loss = 0.0;
    let mut count = 0usize;
    let scale = 1.0 / (d as f64).sqrt();
    for ex in examples {
        let h = &ex.features;
        let m = h.len();
        let j = ex.column_rank;
        let (q, k) = project(h, weights);
        let hj = h.row(j);
        let kj = &k[j * d..(j + 1) * d];
        for i in 0..m {
            if i == j {
                continue;
            }
            let qi = &q[i * d..(i + 1) * d];
            let hi = h.row(i);
            let z: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            let pred = sigmoid(z);
            let err = pred - ex.targets[i];
            loss += err * err;
            count += 1;
            let g = 2.0 * err * pred * (1.0 - pred) * scale;
            // dz/dW_Q = h_i^T k_j, dz/dW_K = h_j^T q_i
            for (a, (&hia, &hja)) in hi.iter().zip(hj).enumerate() {
                let gh_i = g * hia;
                let gh_j = g * hja;
                for b in 0..d {
                    grad_q[a * d + b] += gh_i * kj[b];
                    grad_k[a * d + b] += gh_j * qi[b];
                }
            }
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        for g in grad_q.iter_mut().chain(grad_k.iter_mut()) {
            *g *= inv;
        }
        loss *= inv;
    }
    Ok((grad_q, grad_k, loss))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(
        &mut self,
        w: &mut [f64],
        grad: &[f64],
        lr: f64,
        settings: &TrainSettings,
        t: usize,
    ) {
        let b1 = settings.beta1;
        let b2 = settings.beta2;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for idx in 0..w.len() {
            let g = grad[idx];
            self.m[idx] = b1 * self.m[idx] + (1.0 - b1) * g;
            self.v[idx] = b2 * self.v[idx] + (1.0 - b2) * g * g;
            let m_hat = self.m[idx] / bc1;
            let v_hat = self.v[idx] / bc2;
            w[idx] -= lr * (m_hat / (v_hat.sqrt() + settings.adam_eps));
            // decoupled weight decay
            w[idx] -= lr * settings.weight_decay * w[idx];
        }
    }
}

/// Learning rate at optimizer step `t` of `total`: linear warmup over the
/// first `warmup_frac` of steps, cosine decay to zero afterwards.
fn scheduled_lr(base: f64, t: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64) * warmup_frac).ceil().max(1.0);
    let t = t as f64;
    if t <= warmup {
        base * t / warmup
    } else {
        let progress = (t - warmup) / ((total as f64 - warmup).max(1.0));
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Train the bilinear predictor on cached TV columns, returning the weights
/// of the epoch with the lowest validation loss (merged form precomputed)
/// and the loss curves.
pub fn train_predictor(
    examples: &[TrainExample],
    d: usize,
    settings: &TrainSettings,
    train_seed: u64,
) -> Result<(PredictorWeights, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::EmptyCache);
    }
    for ex in examples {
        if ex.features.d != d {
            return Err(Error::DimensionMismatch {
                what: "training example feature dimension",
                expected: d,
                got: ex.features.d,
            });
        }
    }
    let mut rng = seed::derive_rng(train_seed, &[0x7261696e]);
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    shuffle(&mut indices, &mut rng);
    let val_count = if examples.len() >= 4 {
        ((examples.len() as f64 * settings.val_fraction).round() as usize)
            .clamp(1, examples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = indices.split_at(val_count);
    let train_set: Vec<TrainExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val_set: Vec<TrainExample> = if val_count > 0 {
        val_idx.iter().map(|&i| examples[i].clone()).collect()
    } else {
        train_set.clone()
    };

    let mut weights = PredictorWeights::random(d, settings.init_scale, &mut rng);
    let batches_per_epoch = train_set.len().div_ceil(settings.batch_size).max(1);
    let total_steps = batches_per_epoch * settings.epochs;
    let mut adam_q = AdamState::new(d * d);
    let mut adam_k = AdamState::new(d * d);

    let initial_train_loss = batch_loss(&train_set, &weights)?;
    let mut report = TrainReport {
        initial_train_loss,
        epoch_train_loss: Vec::with_capacity(settings.epochs),
        epoch_val_loss: Vec::with_capacity(settings.epochs),
        epoch_val_mae: Vec::with_capacity(settings.epochs),
        best_epoch: 0,
        final_train_loss: initial_train_loss,
    };

    let mut best = (f64::INFINITY, weights.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 0..settings.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(settings.batch_size) {
            step += 1;
            let batch: Vec<TrainExample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (gq, gk, loss) = batch_gradients(&batch, &weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let lr = scheduled_lr(settings.learning_rate, step, total_steps, settings.warmup_frac);
            adam_q.step(&mut weights.w_q, &gq, lr, settings, step);
            adam_k.step(&mut weights.w_k, &gk, lr, settings, step);
        }
        let train_loss = batch_loss(&train_set, &weights)?;
        let val_loss = batch_loss(&val_set, &weights)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        report.epoch_train_loss.push(train_loss);
        report.epoch_val_loss.push(val_loss);
        report.epoch_val_mae.push(batch_mae(&val_set, &weights)?);
        if val_loss < best.0 {
            best = (val_loss, weights.clone());
            report.best_epoch = epoch;
        }
        report.final_train_loss = train_loss;
    }

    let mut best_weights = best.1;
    best_weights.merge();
    Ok((best_weights, report))
}

/// Fisher-Yates with the caller's rng.
fn shuffle<R: Rng>(items: &mut [usize], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Versioned checkpoint document: header fields plus row-major matrices.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    d: usize,
    feature_config: FeatureConfig,
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    #[serde(default)]
    merged: Option<Vec<f64>>,
}

/// Persist weights and the featurizer shape. Round-trips bit-exactly.
pub fn save_checkpoint(
    weights: &PredictorWeights,
    cfg: &FeatureConfig,
    path: &Path,
) -> Result<()> {
    if cfg.d() != weights.d {
        return Err(Error::DimensionMismatch {
            what: "feature config vs weights",
            expected: weights.d,
            got: cfg.d(),
        });
    }
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        d: weights.d,
        feature_config: *cfg,
        w_q: weights.w_q.clone(),
        w_k: weights.w_k.clone(),
        merged: weights.merged.clone(),
    };
    let text = serde_json::to_string(&doc)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a checkpoint, recomputing the merged matrix when absent and
/// validating it when present.
pub fn load_checkpoint(path: &Path) -> Result<(PredictorWeights, FeatureConfig)> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&text)?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: doc.format_version,
        });
    }
    if doc.feature_config.d() != doc.d {
        return Err(Error::DimensionMismatch {
            what: "checkpoint header d vs feature widths",
            expected: doc.feature_config.d(),
            got: doc.d,
        });
    }
    let mut weights = PredictorWeights::from_parts(doc.d, doc.w_q, doc.w_k)?;
    weights.merged = doc.merged;
    weights.validate_merged()?;
    if weights.merged.is_none() {
        weights.merge();
    }
    Ok((weights, doc.feature_config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_task_model, TaskKind, VocabSpec};
    use crate::seed::seeded_rng;

    fn copy2() -> TabularModel {
        make_task_model(TaskKind::Copy, VocabSpec::new(2, 1).unwrap(), 2, 0).unwrap()
    }

    fn feature_matrix(d: usize, rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let order: Vec<usize> = (0..rows.len()).collect();
        FeatureMatrix {
            order,
            d,
            rows: rows.into_iter().flatten().collect(),
        }
    }

    #[test]
    fn featurize_point_mass_marginal_is_one_hot() {
        let m = copy2();
        let state = MaskState::with_revealed(2, [(0, 1)]).unwrap();
        let cfg = FeatureConfig::new(
            2,
            2,
            ComponentFlags {
                marginal: true,
                position_one_hot: false,
                revealed_pattern: false,
            },
        )
        .unwrap();
        let h = featurize(&m, &state, &cfg).unwrap();
        assert_eq!(h.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn featurize_independent_ignores_irrelevant_reveals() {
        let m = make_task_model(TaskKind::Independent, VocabSpec::new(3, 2).unwrap(), 3, 5)
            .unwrap();
        let cfg = FeatureConfig::new(
            3,
            3,
            ComponentFlags {
                marginal: true,
                position_one_hot: false,
                revealed_pattern: false,
            },
        )
        .unwrap();
        let h1 = featurize(&m, &MaskState::with_revealed(3, [(0, 0)]).unwrap(), &cfg).unwrap();
        let h2 = featurize(&m, &MaskState::with_revealed(3, [(0, 2)]).unwrap(), &cfg).unwrap();
        assert_eq!(h1.rows, h2.rows);
    }

    #[test]
    fn featurize_copy_rows_differ_only_in_one_hot() {
        let m = copy2();
        let cfg = FeatureConfig::full(2, 2);
        let h = featurize(&m, &MaskState::fully_masked(2), &cfg).unwrap();
        // marginal blocks equal, one-hot blocks differ, bitmap blocks equal
        assert_eq!(h.row(0)[..2], h.row(1)[..2]);
        assert_ne!(h.row(0)[2..4], h.row(1)[2..4]);
        assert_eq!(h.row(0)[4..], h.row(1)[4..]);
    }

    #[test]
    fn zero_weights_predict_half_off_diagonal() {
        let h = feature_matrix(3, vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5]]);
        let w = PredictorWeights::zeros(3);
        let d = predict_dependency(&h, &w).unwrap();
        assert_eq!(d.get(0, 1), 0.5);
        assert_eq!(d.get(1, 0), 0.5);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn merged_path_matches_projection_path() {
        let mut rng = seeded_rng(3);
        let h = feature_matrix(
            4,
            (0..3)
                .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
                .collect(),
        );
        let mut w = PredictorWeights::random(4, 0.5, &mut rng);
        let two_path = predict_dependency(&h, &w).unwrap();
        w.merge();
        w.validate_merged().unwrap();
        let merged_path = predict_dependency(&h, &w).unwrap();
        for (a, b) in two_path.values().iter().zip(merged_path.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn swapping_rows_swaps_predictions() {
        let mut rng = seeded_rng(9);
        let r0: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let r1: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let w = PredictorWeights::random(3, 0.8, &mut rng);
        let a = predict_dependency(&feature_matrix(3, vec![r0.clone(), r1.clone()]), &w).unwrap();
        let b = predict_dependency(&feature_matrix(3, vec![r1, r0]), &w).unwrap();
        assert!((a.get(0, 1) - b.get(1, 0)).abs() < 1e-12);
        assert!((a.get(1, 0) - b.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn cache_gen_examples() {
        // independent model: every cached value is exactly zero
        let ind = make_task_model(TaskKind::Independent, VocabSpec::new(3, 2).unwrap(), 4, 8)
            .unwrap();
        let cfg = CacheGenConfig {
            responses_per_model: 3,
            samples_per_response: 5,
            seed: 21,
        };
        let records = generate_tv_cache(std::slice::from_ref(&ind), &cfg).unwrap();
        assert!(!records.is_empty());
        assert!(records
            .iter()
            .all(|r| r.d_column.iter().all(|&x| x == 0.0)));
        // copy model, both masked: the off-diagonal entry is 0.5 either way
        let m = copy2();
        let cfg = CacheGenConfig {
            responses_per_model: 8,
            samples_per_response: 5,
            seed: 4,
        };
        let records = generate_tv_cache(std::slice::from_ref(&m), &cfg).unwrap();
        let full: Vec<_> = records.iter().filter(|r| r.masked.len() == 2).collect();
        assert!(!full.is_empty());
        for r in &full {
            let rank = if r.j == 0 { 0 } else { 1 };
            assert_eq!(r.d_column[rank], 0.0);
            assert!((r.d_column[1 - rank] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_gen_is_deterministic_and_matches_dependency_sample() {
        let m = make_task_model(TaskKind::DenseRandom, VocabSpec::new(3, 2).unwrap(), 4, 13)
            .unwrap();
        let cfg = CacheGenConfig {
            responses_per_model: 4,
            samples_per_response: 3,
            seed: 99,
        };
        let a = generate_tv_cache(std::slice::from_ref(&m), &cfg).unwrap();
        let b = generate_tv_cache(std::slice::from_ref(&m), &cfg).unwrap();
        assert_eq!(a, b);
        for r in a.iter().take(10) {
            let state = r.state().unwrap();
            for (rank, &i) in r.masked.iter().enumerate() {
                if i == r.j {
                    continue;
                }
                let oracle = crate::tv::dependency_sample(&m, &state, i, r.j, r.y).unwrap();
                assert!((r.d_column[rank] - oracle).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cache_jsonl_roundtrip() {
        let m = copy2();
        let cfg = CacheGenConfig {
            responses_per_model: 2,
            samples_per_response: 3,
            seed: 1,
        };
        let records = generate_tv_cache(std::slice::from_ref(&m), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        write_cache_jsonl(&records, &path).unwrap();
        let back = read_cache_jsonl(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn training_reduces_loss_on_independent_targets() {
        let ind = make_task_model(TaskKind::Independent, VocabSpec::new(2, 1).unwrap(), 3, 2)
            .unwrap();
        let cache_cfg = CacheGenConfig {
            responses_per_model: 20,
            samples_per_response: 5,
            seed: 5,
        };
        let records = generate_tv_cache(std::slice::from_ref(&ind), &cache_cfg).unwrap();
        let fcfg = FeatureConfig::full(2, 3);
        let registry: HashMap<String, TabularModel> =
            [(ind.id(), ind.clone())].into_iter().collect();
        let examples = examples_from_cache(&records, &registry, &fcfg).unwrap();
        let settings = TrainSettings {
            epochs: 40,
            ..TrainSettings::default()
        };
        let (weights, report) = train_predictor(&examples, fcfg.d(), &settings, 7).unwrap();
        assert!(report.final_train_loss < report.initial_train_loss);
        // all targets are zero: predictions drift below the sigmoid midpoint
        let state = MaskState::fully_masked(3);
        let h = featurize(&ind, &state, &fcfg).unwrap();
        let d = predict_dependency(&h, &weights).unwrap();
        assert!(d.get(0, 1) < 0.5);
        assert!(d.get(1, 0) < 0.5);
    }

    #[test]
    fn heldout_mae_decreases_on_exact_targets() {
        // copy-model contexts: the exact dependency of a pair is determined
        // by the feature rows (uniform marginals couple, point-mass
        // marginals do not), so the regression target is learnable
        let m = make_task_model(TaskKind::Copy, VocabSpec::new(2, 1).unwrap(), 3, 0).unwrap();
        let fcfg = FeatureConfig::full(2, 3);
        let mut examples = Vec::new();
        let contexts = [
            MaskState::fully_masked(3),
            MaskState::with_revealed(3, [(0, 0)]).unwrap(),
            MaskState::with_revealed(3, [(0, 1)]).unwrap(),
            MaskState::with_revealed(3, [(1, 0)]).unwrap(),
            MaskState::with_revealed(3, [(2, 1)]).unwrap(),
        ];
        for state in &contexts {
            let features = featurize(&m, state, &fcfg).unwrap();
            let exact = crate::tv::dependency_matrix_exact(&m, state).unwrap();
            let k = state.masked().len();
            for j in 0..k {
                let targets: Vec<f64> = (0..k).map(|i| exact.get(i, j)).collect();
                // replicate so the split leaves both sides populated
                for _ in 0..6 {
                    examples.push(TrainExample {
                        features: features.clone(),
                        column_rank: j,
                        targets: targets.clone(),
                    });
                }
            }
        }
        let settings = TrainSettings {
            epochs: 12,
            ..TrainSettings::default()
        };
        let (_, report) = train_predictor(&examples, fcfg.d(), &settings, 3).unwrap();
        let mae = &report.epoch_val_mae;
        assert!(mae.len() >= 6);
        for w in mae[..6].windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "held-out MAE increased early: {mae:?}"
            );
        }
        assert!(mae[5] < mae[0]);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bit_exact() {
        let h = feature_matrix(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let examples = vec![TrainExample {
            features: h,
            column_rank: 1,
            targets: vec![0.3, 0.0],
        }];
        let settings = TrainSettings {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainSettings::default()
        };
        let (trained, _) = train_predictor(&examples, 2, &settings, 11).unwrap();
        // reconstruct the same initialization stream
        let mut rng = seed::derive_rng(11, &[0x7261696e]);
        let mut idx: Vec<usize> = (0..1).collect();
        shuffle(&mut idx, &mut rng);
        let init = PredictorWeights::random(2, settings.init_scale, &mut rng);
        assert_eq!(trained.w_q(), init.w_q());
        assert_eq!(trained.w_k(), init.w_k());
    }

    #[test]
    fn empty_cache_is_an_error() {
        let settings = TrainSettings::default();
        assert!(matches!(
            train_predictor(&[], 4, &settings, 0),
            Err(Error::EmptyCache)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(17);
        for _ in 0..5 {
            let d = 3;
            let m = 3;
            let h = feature_matrix(
                d,
                (0..m)
                    .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
                    .collect(),
            );
            let targets: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let examples = vec![TrainExample {
                features: h,
                column_rank: 1,
                targets,
            }];
            let weights = PredictorWeights::random(d, 0.5, &mut rng);
            let (gq, gk, _) = batch_gradients(&examples, &weights).unwrap();
            let eps = 1e-6;
            for idx in 0..d * d {
                for (which, analytic) in [(0usize, gq[idx]), (1, gk[idx])] {
                    let mut plus = weights.clone();
                    let mut minus = weights.clone();
                    if which == 0 {
                        plus.w_q[idx] += eps;
                        minus.w_q[idx] -= eps;
                    } else {
                        plus.w_k[idx] += eps;
                        minus.w_k[idx] -= eps;
                    }
                    let numeric = (batch_loss(&examples, &plus).unwrap()
                        - batch_loss(&examples, &minus).unwrap())
                        / (2.0 * eps);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        ((analytic - numeric) / denom).abs() < 1e-4,
                        "grad mismatch: analytic {analytic} numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let mut rng = seeded_rng(23);
        let fcfg = FeatureConfig::full(2, 2);
        let mut w = PredictorWeights::random(fcfg.d(), 0.3, &mut rng);
        w.merge();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&w, &fcfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.w_q(), w.w_q());
        assert_eq!(loaded.w_k(), w.w_k());
        assert_eq!(loaded_cfg, fcfg);
        // identical predictions on a fixed H
        let h = feature_matrix(
            fcfg.d(),
            vec![
                (0..fcfg.d()).map(|x| x as f64).collect(),
                (0..fcfg.d()).map(|x| (x * x) as f64).collect(),
            ],
        );
        assert_eq!(
            predict_dependency(&h, &w).unwrap().values(),
            predict_dependency(&h, &loaded).unwrap().values()
        );

        // version mismatch
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replace("\"format_version\":1", "\"format_version\":9");
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::FormatVersionMismatch {
                expected: 1,
                found: 9
            })
        ));
    }

    #[test]
    fn checkpoint_without_merged_recomputes_it() {
        let mut rng = seeded_rng(29);
        let fcfg = FeatureConfig::full(2, 2);
        let w = PredictorWeights::random(fcfg.d(), 0.3, &mut rng); // merged absent
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&w, &fcfg, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let mut reference = w.clone();
        reference.merge();
        let (a, b) = (loaded.merged().unwrap(), reference.merged().unwrap());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}
