//! Greedy dependency-bounded subset selection.
//!
//! Starting from the left-most masked position, repeatedly add the
//! high-confidence candidate whose summed dependency on the already selected
//! positions is smallest, stopping when no candidate clears the confidence
//! threshold or the next addition would push the accumulated dependency past
//! the budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Position;
use crate::tv::DependencyMatrix;

/// Selection thresholds: `tau` bounds the accumulated pairwise dependency,
/// `gamma` is the top-1 confidence floor applied to candidates after the
/// forced first pick. `tau` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub tau: f64,
    pub gamma: f64,
}

impl SelectionConfig {
    pub fn new(tau: f64, gamma: f64) -> Result<Self> {
        if tau.is_nan() || tau < 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be >= 0, got {tau}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in [0, 1], got {gamma}"
            )));
        }
        Ok(Self { tau, gamma })
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        // grid-selected operating point
        Self {
            tau: 0.04,
            gamma: 0.9,
        }
    }
}

/// Outcome of one greedy selection: positions in pick order, the accumulated
/// dependency, and the marginal cost of each pick (zero for the forced first
/// position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<Position>,
    pub accumulated: f64,
    pub per_pick_delta: Vec<f64>,
}

/// Greedy subset selection over the masked positions.
///
/// `dep.order()` must equal `masked`; `top1` holds the top-1 confidence per
/// masked position in the same order. The first pick is the minimum masked
/// position, added unconditionally at zero cost; it is exempt from the
/// confidence filter. Argmin ties break toward the lowest position index.
pub fn greedy_subset_select(
    dep: &DependencyMatrix,
    masked: &[Position],
    top1: &[f64],
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    if masked.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    if dep.order() != masked {
        return Err(Error::DimensionMismatch {
            what: "dependency matrix order vs masked set",
            expected: masked.len(),
            got: dep.order().len(),
        });
    }
    if top1.len() != masked.len() {
        return Err(Error::DimensionMismatch {
            what: "top1 confidence vector",
            expected: masked.len(),
            got: top1.len(),
        });
    }
    debug_assert!(top1.iter().all(|p| (0.0..=1.0).contains(p)));

    let k = masked.len();
    let mut in_set = vec![false; k];
    // running column sums: cost[c] = sum over selected s of dep[c][s]
    let mut cost = vec![0.0f64; k];
    let mut chosen = Vec::with_capacity(k);
    let mut per_pick_delta = Vec::with_capacity(k);
    let mut accumulated = 0.0f64;

    let add = |rank: usize,
                   delta: f64,
                   in_set: &mut Vec<bool>,
                   cost: &mut Vec<f64>,
                   chosen: &mut Vec<Position>,
                   per_pick_delta: &mut Vec<f64>| {
        in_set[rank] = true;
        chosen.push(masked[rank]);
        per_pick_delta.push(delta);
        for c in 0..k {
            if !in_set[c] {
                cost[c] += dep.get(c, rank);
            }
        }
    };

    // masked is sorted ascending, so rank 0 is the left-most position
    add(
        0,
        0.0,
        &mut in_set,
        &mut cost,
        &mut chosen,
        &mut per_pick_delta,
    );

    loop {
        let mut best: Option<usize> = None;
        for c in 0..k {
            // strict confidence filter: top1 must exceed gamma
            if in_set[c] || top1[c] <= cfg.gamma {
                continue;
            }
            match best {
                None => best = Some(c),
                Some(b) => {
                    // strict less keeps the lowest index on ties
                    if cost[c] < cost[b] {
                        best = Some(c);
                    }
                }
            }
        }
        let Some(c) = best else { break };
        let delta = cost[c];
        if accumulated + delta > cfg.tau {
            break;
        }
        accumulated += delta;
        add(
            c,
            delta,
            &mut in_set,
            &mut cost,
            &mut chosen,
            &mut per_pick_delta,
        );
    }

    Ok(SelectionResult {
        chosen,
        accumulated,
        per_pick_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tv::DepSource;
    use proptest::prelude::*;

    fn dep(order: Vec<usize>, values: Vec<f64>) -> DependencyMatrix {
        DependencyMatrix::new(order, values, DepSource::Exact).unwrap()
    }

    #[test]
    fn all_zero_dep_selects_everything() {
        let d = DependencyMatrix::zeros(vec![0, 1, 2, 3], DepSource::Exact);
        let cfg = SelectionConfig::new(0.0, 0.0).unwrap();
        let r = greedy_subset_select(&d, &[0, 1, 2, 3], &[0.5, 0.5, 0.5, 0.5], &cfg).unwrap();
        assert_eq!(r.chosen, vec![0, 1, 2, 3]);
        assert_eq!(r.accumulated, 0.0);
    }

    #[test]
    fn arithmetic_budget_examples() {
        // masked {b, c} with both dependencies 2/3
        let d = dep(vec![1, 2], vec![0.0, 2.0 / 3.0, 2.0 / 3.0, 0.0]);
        let tight = SelectionConfig::new(0.04, 0.0).unwrap();
        let r = greedy_subset_select(&d, &[1, 2], &[1.0 / 3.0, 1.0 / 3.0], &tight).unwrap();
        assert_eq!(r.chosen, vec![1]);
        assert_eq!(r.accumulated, 0.0);
        let loose = SelectionConfig::new(1.0, 0.0).unwrap();
        let r = greedy_subset_select(&d, &[1, 2], &[1.0 / 3.0, 1.0 / 3.0], &loose).unwrap();
        assert_eq!(r.chosen, vec![1, 2]);
        assert!((r.accumulated - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_pick_delta.len(), 2);
        assert_eq!(r.per_pick_delta[0], 0.0);
    }

    #[test]
    fn first_pick_is_exempt_from_confidence_filter() {
        let d = DependencyMatrix::zeros(vec![3, 5], DepSource::Exact);
        let cfg = SelectionConfig::new(1.0, 0.99).unwrap();
        let r = greedy_subset_select(&d, &[3, 5], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(r.chosen, vec![3]);
    }

    #[test]
    fn argmin_ties_break_to_lowest_position() {
        // ranks 1 and 2 both cost 0.1 against the seed pick
        let d = dep(
            vec![0, 4, 7],
            vec![0.0, 0.3, 0.3, 0.1, 0.0, 0.3, 0.1, 0.3, 0.0],
        );
        let cfg = SelectionConfig::new(0.15, 0.0).unwrap();
        let r = greedy_subset_select(&d, &[0, 4, 7], &[0.9, 0.9, 0.9], &cfg).unwrap();
        assert_eq!(r.chosen, vec![0, 4]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let d = DependencyMatrix::zeros(vec![], DepSource::Exact);
        assert!(matches!(
            greedy_subset_select(&d, &[], &[], &SelectionConfig::default()),
            Err(Error::EmptyMaskSet)
        ));
    }

    #[test]
    fn infinite_tau_takes_all_confident_positions() {
        let d = dep(vec![0, 1, 2], vec![0.0, 0.9, 0.9, 0.9, 0.0, 0.9, 0.9, 0.9, 0.0]);
        let cfg = SelectionConfig::new(f64::INFINITY, 0.0).unwrap();
        let r = greedy_subset_select(&d, &[0, 1, 2], &[0.4, 0.4, 0.4], &cfg).unwrap();
        assert_eq!(r.chosen.len(), 3);
    }

    #[test]
    fn zero_tau_with_positive_dep_selects_one() {
        let d = dep(vec![0, 1], vec![0.0, 0.01, 0.01, 0.0]);
        let cfg = SelectionConfig::new(0.0, 0.0).unwrap();
        let r = greedy_subset_select(&d, &[0, 1], &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(r.chosen, vec![0]);
    }

    fn arb_instance() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|k| {
            (
                Just(k),
                proptest::collection::vec(0.0f64..1.0, k * k),
                proptest::collection::vec(0.0f64..1.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn budget_and_prefix_monotonicity(
            (k, mut raw, top1) in arb_instance(),
            tau1 in 0.0f64..1.5,
            extra in 0.0f64..1.5,
            gamma in 0.0f64..1.0,
        ) {
            for i in 0..k {
                raw[i * k + i] = 0.0;
            }
            let masked: Vec<usize> = (0..k).collect();
            let d = dep(masked.clone(), raw);
            let tau2 = tau1 + extra;
            let c1 = SelectionConfig::new(tau1, gamma).unwrap();
            let c2 = SelectionConfig::new(tau2, gamma).unwrap();
            let r1 = greedy_subset_select(&d, &masked, &top1, &c1).unwrap();
            let r2 = greedy_subset_select(&d, &masked, &top1, &c2).unwrap();

            // determinism
            let r1b = greedy_subset_select(&d, &masked, &top1, &c1).unwrap();
            prop_assert_eq!(&r1, &r1b);

            // budget, audit, and the forced first pick
            prop_assert!(!r1.chosen.is_empty());
            prop_assert_eq!(r1.chosen[0], 0);
            prop_assert!(r1.accumulated <= tau1 + 1e-12);
            let sum: f64 = r1.per_pick_delta.iter().sum();
            prop_assert!((sum - r1.accumulated).abs() < 1e-12);
            // removing the last pick keeps every prefix within budget
            let mut acc = 0.0;
            for d in &r1.per_pick_delta {
                acc += d;
                prop_assert!(acc <= tau1 + 1e-12);
            }

            // the tau1 selection is a prefix (in pick order) of the tau2 one
            prop_assert!(r2.chosen.len() >= r1.chosen.len());
            prop_assert_eq!(&r2.chosen[..r1.chosen.len()], &r1.chosen[..]);
        }
    }
}
