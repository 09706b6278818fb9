//! Total-variation distance and exact pairwise dependency quantities.
//!
//! The dependency of masked position i on masked position j is the expected
//! TV change in i's conditional when j is revealed, the expectation running
//! over j's exact conditional marginal. This module computes those values by
//! exact summation; it is the oracle that the learned predictor and the
//! decoding bound checks are measured against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    checked_pow, conditional_marginal, masked_mass_table, MaskState, Position, TabularModel,
    Token,
};

/// Total variation distance between two distributions on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "tv_distance operands",
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(tv_unchecked(p, q))
}

/// TV for slices known to have equal length.
pub(crate) fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    (0.5 * d).clamp(0.0, 1.0)
}

/// Whether a dependency matrix holds exact oracle values or predictor output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepSource {
    Exact,
    Predicted,
}

/// Pairwise dependency values over a masked-position ordering. Entry (i, j)
/// is the dependency of position `order[i]` on position `order[j]`; the
/// matrix is generally asymmetric and its diagonal is exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyMatrix {
    order: Vec<Position>,
    values: Vec<f64>,
    source: DepSource,
}

impl DependencyMatrix {
    pub fn new(order: Vec<Position>, values: Vec<f64>, source: DepSource) -> Result<Self> {
        let k = order.len();
        if values.len() != k * k {
            return Err(Error::DimensionMismatch {
                what: "dependency matrix values",
                expected: k * k,
                got: values.len(),
            });
        }
        for i in 0..k {
            for j in 0..k {
                let v = values[i * k + j];
                if i == j {
                    if v != 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "dependency diagonal entry ({i},{i}) must be 0, got {v}"
                        )));
                    }
                } else if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidConfig(format!(
                        "dependency entry ({i},{j}) out of [0,1]: {v}"
                    )));
                }
            }
        }
        Ok(Self {
            order,
            values,
            source,
        })
    }

    pub fn zeros(order: Vec<Position>, source: DepSource) -> Self {
        let k = order.len();
        Self {
            order,
            values: vec![0.0; k * k],
            source,
        }
    }

    /// Ascending masked positions this matrix indexes.
    pub fn order(&self) -> &[Position] {
        &self.order
    }

    pub fn source(&self) -> DepSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Value by rank pair.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.order.len() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Normalized joint over masked-position assignments with digit strides,
/// supporting marginal and subset queries from single passes.
pub(crate) struct ContextTable {
    vocab: usize,
    masked: Vec<Position>,
    strides: Vec<usize>,
    table: Vec<f64>,
}

impl ContextTable {
    pub fn new(model: &TabularModel, state: &MaskState) -> Result<Self> {
        let table = masked_mass_table(model, state)?;
        let k = state.masked().len();
        let v = model.vocab().size;
        let mut strides = vec![1usize; k];
        for i in (0..k.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * v;
        }
        Ok(Self {
            vocab: v,
            masked: state.masked().to_vec(),
            strides,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.masked.len()
    }

    fn digit(&self, entry: usize, rank: usize) -> usize {
        (entry / self.strides[rank]) % self.vocab
    }

    /// Marginals of every masked rank from one pass.
    pub fn all_marginals(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        let mut out = vec![vec![0.0; self.vocab]; k];
        for (idx, &p) in self.table.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (rank, row) in out.iter_mut().enumerate() {
                row[self.digit(idx, rank)] += p;
            }
        }
        out
    }

    /// Joint over an ordered list of ranks (lexicographic, first rank most
    /// significant).
    pub fn subset_joint(&self, ranks: &[usize]) -> Vec<f64> {
        let mut size = 1usize;
        for _ in ranks {
            size *= self.vocab;
        }
        let mut out = vec![0.0; size];
        for (idx, &p) in self.table.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut o = 0usize;
            for &r in ranks {
                o = o * self.vocab + self.digit(idx, r);
            }
            out[o] += p;
        }
        out
    }
}

/// TV between position i's conditional before and after revealing one
/// specific realization of position j. Positions are global; both must be
/// masked and distinct.
pub fn dependency_sample(
    model: &TabularModel,
    state: &MaskState,
    i: Position,
    j: Position,
    y_j: Token,
) -> Result<f64> {
    if i == j {
        return Err(Error::InvalidConfig(
            "dependency_sample requires distinct positions".into(),
        ));
    }
    let base = conditional_marginal(model, state, i)?;
    if !model.is_independent() {
        let marg_j = conditional_marginal(model, state, j)?;
        if marg_j[y_j] <= 0.0 {
            return Err(Error::ZeroProbabilityContext);
        }
    }
    let revealed = conditional_marginal(model, &state.reveal(j, y_j), i)?;
    tv_distance(&base, &revealed)
}

/// Marginals plus all pairwise joints over a masked context, built from one
/// pass over the context table. Backs both the exact dependency matrix and
/// cache generation, where the per-realization TV of every pair is needed.
pub(crate) struct PairStats {
    v: usize,
    k: usize,
    pub(crate) marginals: Vec<Vec<f64>>,
    /// joints for i < j only; (j, i) reads the transpose
    pairs: Vec<Vec<f64>>,
}

impl PairStats {
    pub fn new(ctx: &ContextTable) -> Self {
        let k = ctx.dim();
        let v = ctx.vocab;
        let marginals = ctx.all_marginals();
        let mut pairs = vec![vec![0.0; v * v]; k * k];
        for (idx, &p) in ctx.table.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for i in 0..k {
                let di = ctx.digit(idx, i);
                for j in (i + 1)..k {
                    let dj = ctx.digit(idx, j);
                    pairs[i * k + j][di * v + dj] += p;
                }
            }
        }
        Self {
            v,
            k,
            marginals,
            pairs,
        }
    }

    fn pair_at(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        if i < j {
            self.pairs[i * self.k + j][a * self.v + b]
        } else {
            self.pairs[j * self.k + i][b * self.v + a]
        }
    }

    /// TV between rank i's marginal and its conditional given rank j = y.
    /// Zero-probability realizations are the caller's error to avoid.
    pub fn dep_sample(&self, i: usize, j: usize, y: usize) -> f64 {
        let w = self.marginals[j][y];
        debug_assert!(w > 0.0);
        let mut d = 0.0;
        for a in 0..self.v {
            d += (self.marginals[i][a] - self.pair_at(i, j, a, y) / w).abs();
        }
        (0.5 * d).clamp(0.0, 1.0)
    }

    /// Expected TV over rank j's marginal: one dependency matrix entry.
    pub fn dep_expected(&self, i: usize, j: usize) -> f64 {
        let mut expected = 0.0;
        for b in 0..self.v {
            let w = self.marginals[j][b];
            if w > 0.0 {
                expected += w * self.dep_sample(i, j, b);
            }
        }
        expected.clamp(0.0, 1.0)
    }
}

/// Exact pairwise dependency matrix over the masked positions of `state`,
/// built from one enumeration pass plus per-pair joint tables. Equals the
/// expectation of `dependency_sample` under each column's exact marginal.
pub fn dependency_matrix_exact(model: &TabularModel, state: &MaskState) -> Result<DependencyMatrix> {
    let masked = state.masked().to_vec();
    let k = masked.len();
    if model.is_independent() {
        // conditioning is vacuous under a product joint
        return Ok(DependencyMatrix::zeros(masked, DepSource::Exact));
    }
    let ctx = ContextTable::new(model, state)?;
    let stats = PairStats::new(&ctx);
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                values[i * k + j] = stats.dep_expected(i, j);
            }
        }
    }
    DependencyMatrix::new(masked, values, DepSource::Exact)
}

/// Left- and right-hand sides of the sub-additivity comparison for target
/// position `i` under a joint reveal of `subset` at `realization`: the left
/// side is the TV induced by revealing the whole subset at once, the right
/// side sums the TVs of the single reveals. The reported slack is rhs - lhs.
pub fn subadditivity_slack(
    model: &TabularModel,
    state: &MaskState,
    target: Position,
    subset: &[Position],
    realization: &[Token],
) -> Result<(f64, f64)> {
    if subset.len() != realization.len() {
        return Err(Error::DimensionMismatch {
            what: "subadditivity realization",
            expected: subset.len(),
            got: realization.len(),
        });
    }
    if subset.contains(&target) {
        return Err(Error::InvalidConfig(
            "target must lie outside the revealed subset".into(),
        ));
    }
    let base = conditional_marginal(model, state, target)?;
    let joint_state = state.reveal_many(subset.iter().copied().zip(realization.iter().copied()));
    let joint_cond = conditional_marginal(model, &joint_state, target)?;
    let lhs = tv_unchecked(&base, &joint_cond);
    let mut rhs = 0.0;
    for (&p, &y) in subset.iter().zip(realization) {
        let single = conditional_marginal(model, &state.reveal(p, y), target)?;
        rhs += tv_unchecked(&base, &single);
    }
    Ok((lhs, rhs))
}

/// Guard that a subset enumeration stays within the model's cap.
pub fn check_subset_cap(model: &TabularModel, subset_len: usize) -> Result<()> {
    checked_pow(model.vocab().size, subset_len, model.enumeration_cap())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_task_model, TaskKind, VocabSpec};
    use crate::seed::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    const TOL: f64 = 1e-12;

    fn copy(v: usize, n: usize) -> TabularModel {
        make_task_model(TaskKind::Copy, VocabSpec::new(v, v - 1).unwrap(), n, 0).unwrap()
    }

    fn arith3() -> TabularModel {
        make_task_model(TaskKind::ArithmeticMod, VocabSpec::new(3, 2).unwrap(), 3, 0).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let d = tv_distance(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((d - 0.4).abs() < TOL);
    }

    #[test]
    fn tv_dimension_mismatch() {
        assert!(matches!(
            tv_distance(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dependency_sample_examples() {
        // independent: exactly zero
        let ind =
            make_task_model(TaskKind::Independent, VocabSpec::new(3, 2).unwrap(), 3, 4).unwrap();
        let s = MaskState::fully_masked(3);
        for (i, j) in [(0, 1), (1, 0), (2, 1)] {
            for y in 0..3 {
                assert_eq!(dependency_sample(&ind, &s, i, j, y).unwrap(), 0.0);
            }
        }
        // copy V=2: revealing the first position pins the second
        let m = copy(2, 2);
        let s = MaskState::fully_masked(2);
        let d = dependency_sample(&m, &s, 1, 0, 0).unwrap();
        assert!((d - 0.5).abs() < TOL);
        // arithmetic mod 3 with a revealed: revealing b pins c
        let m = arith3();
        let s = MaskState::with_revealed(3, [(0, 1)]).unwrap();
        for y in 0..3 {
            let d = dependency_sample(&m, &s, 2, 1, y).unwrap();
            assert!((d - 2.0 / 3.0).abs() < TOL);
        }
    }

    #[test]
    fn dependency_sample_rejects_zero_probability_reveal() {
        let m = copy(2, 3);
        let s = MaskState::with_revealed(3, [(0, 0)]).unwrap();
        assert!(matches!(
            dependency_sample(&m, &s, 2, 1, 1),
            Err(Error::ZeroProbabilityContext)
        ));
    }

    #[test]
    fn exact_matrix_examples() {
        // independent: identically zero
        let ind =
            make_task_model(TaskKind::Independent, VocabSpec::new(4, 3).unwrap(), 4, 9).unwrap();
        let d = dependency_matrix_exact(&ind, &MaskState::fully_masked(4)).unwrap();
        assert!(d.values().iter().all(|&x| x == 0.0));
        // copy: both directions 0.5
        let m = copy(2, 2);
        let d = dependency_matrix_exact(&m, &MaskState::fully_masked(2)).unwrap();
        assert!((d.get(1, 0) - 0.5).abs() < TOL);
        assert!((d.get(0, 1) - 0.5).abs() < TOL);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
        // arithmetic with a revealed: D_{c,b} = 2/3
        let m = arith3();
        let s = MaskState::with_revealed(3, [(0, 1)]).unwrap();
        let d = dependency_matrix_exact(&m, &s).unwrap();
        assert_eq!(d.order(), &[1, 2]);
        assert!((d.get(1, 0) - 2.0 / 3.0).abs() < TOL);
        assert!((d.get(0, 1) - 2.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn exact_matrix_equals_explicit_expectation() {
        // oracle cross-check: per-pair summation of dependency_sample
        let mut rng = seeded_rng(31);
        for seed in 0..6u64 {
            let m = make_task_model(
                TaskKind::DenseRandom,
                VocabSpec::new(3, 2).unwrap(),
                4,
                seed,
            )
            .unwrap();
            // random context drawn from the joint so it has positive mass
            let seq = crate::model::sample_sequential(
                &m,
                &MaskState::fully_masked(4),
                crate::model::OrderPolicy::LeftToRight,
                &crate::sampling::SamplerConfig::identity(),
                &mut rng,
            )
            .unwrap();
            let reveal_count = rng.random_range(0..=1usize);
            let state = MaskState::with_revealed(
                4,
                (0..reveal_count).map(|p| (p, seq[p])),
            )
            .unwrap();
            let fast = dependency_matrix_exact(&m, &state).unwrap();
            let masked = state.masked();
            for (ri, &i) in masked.iter().enumerate() {
                for (rj, &j) in masked.iter().enumerate() {
                    if ri == rj {
                        continue;
                    }
                    let marg_j = conditional_marginal(&m, &state, j).unwrap();
                    let mut expected = 0.0;
                    for (y, &w) in marg_j.iter().enumerate() {
                        if w > 0.0 {
                            expected += w * dependency_sample(&m, &state, i, j, y).unwrap();
                        }
                    }
                    assert!(
                        (fast.get(ri, rj) - expected).abs() < 1e-10,
                        "pair ({i},{j}) fast {} explicit {expected}",
                        fast.get(ri, rj)
                    );
                }
            }
        }
    }

    #[test]
    fn slack_examples() {
        // |S| = 1: lhs and rhs are the same quantity
        let m = arith3();
        let s = MaskState::fully_masked(3);
        let (lhs, rhs) = subadditivity_slack(&m, &s, 2, &[1], &[0]).unwrap();
        assert_eq!(lhs, rhs);
        // independent: (0, 0) exactly
        let ind =
            make_task_model(TaskKind::Independent, VocabSpec::new(3, 2).unwrap(), 4, 2).unwrap();
        let (lhs, rhs) =
            subadditivity_slack(&ind, &MaskState::fully_masked(4), 3, &[0, 1], &[1, 2]).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));
        // copy chain: revealing either early position alone already pins the last
        let m = copy(2, 3);
        let (lhs, rhs) =
            subadditivity_slack(&m, &MaskState::fully_masked(3), 2, &[0, 1], &[0, 0]).unwrap();
        assert!((lhs - 0.5).abs() < TOL);
        assert!((rhs - 1.0).abs() < TOL);
        assert!((rhs - lhs - 0.5).abs() < TOL);
    }

    #[test]
    fn matrix_validation() {
        assert!(DependencyMatrix::new(vec![0, 1], vec![0.0; 3], DepSource::Exact).is_err());
        assert!(
            DependencyMatrix::new(vec![0, 1], vec![0.1, 0.2, 0.2, 0.0], DepSource::Exact).is_err()
        );
        assert!(
            DependencyMatrix::new(vec![0, 1], vec![0.0, 1.2, 0.2, 0.0], DepSource::Exact).is_err()
        );
        assert!(
            DependencyMatrix::new(vec![0, 1], vec![0.0, 0.9, 0.1, 0.0], DepSource::Exact).is_ok()
        );
    }

    proptest! {
        #[test]
        fn tv_is_a_metric_on_random_triples(
            raw_p in proptest::collection::vec(0.001f64..1.0, 4),
            raw_q in proptest::collection::vec(0.001f64..1.0, 4),
            raw_r in proptest::collection::vec(0.001f64..1.0, 4),
        ) {
            let norm = |raw: &[f64]| {
                let t: f64 = raw.iter().sum();
                raw.iter().map(|x| x / t).collect::<Vec<_>>()
            };
            let p = norm(&raw_p);
            let q = norm(&raw_q);
            let r = norm(&raw_r);
            let pq = tv_distance(&p, &q).unwrap();
            let qp = tv_distance(&q, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert_eq!(pq, qp);
            prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
            let pr = tv_distance(&p, &r).unwrap();
            let rq = tv_distance(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-12);
        }
    }
}
