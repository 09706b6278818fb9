//! Temperature and nucleus (top-p) transforms over explicit distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling transform settings. Defaults follow the evaluation setup:
/// temperature 0.1 with top-p 0.9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            top_p: 0.9,
        }
    }
}

impl SamplerConfig {
    /// Identity transform: sample the distribution as-is.
    pub fn identity() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
        }
    }

    pub fn new(temperature: f64, top_p: f64) -> Result<Self> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if top_p.is_nan() || top_p <= 0.0 || top_p > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "top_p must be in (0, 1], got {top_p}"
            )));
        }
        Ok(Self { temperature, top_p })
    }

    pub fn is_identity(&self) -> bool {
        self.temperature == 1.0 && self.top_p == 1.0
    }
}

/// Apply temperature scaling then nucleus truncation, renormalizing after
/// each stage. Temperature rescales log-probabilities (p^(1/T)); top-p keeps
/// the smallest prefix of tokens, sorted by descending probability, whose
/// cumulative mass reaches `top_p`, zeroing the rest. Sorting ties break by
/// token index so the transform is deterministic.
pub fn transform_distribution(dist: &[f64], cfg: &SamplerConfig) -> Vec<f64> {
    if cfg.is_identity() {
        return dist.to_vec();
    }
    let mut out = dist.to_vec();
    if cfg.temperature != 1.0 {
        let inv_t = 1.0 / cfg.temperature;
        for x in &mut out {
            // zero entries stay zero: exp((1/T) ln p) with p = 0
            *x = if *x > 0.0 { x.powf(inv_t) } else { 0.0 };
        }
        let total: f64 = out.iter().sum();
        for x in &mut out {
            *x /= total;
        }
    }
    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| {
            out[b]
                .partial_cmp(&out[a])
                .expect("probabilities are finite")
                .then(a.cmp(&b))
        });
        let mut keep = vec![false; out.len()];
        let mut cum = 0.0;
        for &i in &order {
            keep[i] = true;
            cum += out[i];
            // tolerance keeps boundary sums like 0.6 + 0.3 >= 0.9 inclusive
            if cum >= cfg.top_p - 1e-12 {
                break;
            }
        }
        for (x, k) in out.iter_mut().zip(&keep) {
            if !k {
                *x = 0.0;
            }
        }
        let total: f64 = out.iter().sum();
        for x in &mut out {
            *x /= total;
        }
    }
    out
}

/// Inverse-CDF draw from an explicit distribution.
pub fn sample_index<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        cum += p;
        if u < cum {
            return i;
        }
    }
    // u landed in the rounding gap at the top of the CDF
    last_positive
}

/// Transform, then draw one token.
pub fn transform_sample<R: Rng>(dist: &[f64], cfg: &SamplerConfig, rng: &mut R) -> usize {
    let t = transform_distribution(dist, cfg);
    sample_index(&t, rng)
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// KL(current || previous) with an additive guard inside the logs so that
/// vanishing entries stay finite. The guard value keeps results reproducible
/// across runs rather than claiming information-theoretic exactness.
pub fn kl_divergence_guarded(current: &[f64], previous: &[f64]) -> f64 {
    const GUARD: f64 = 1e-12;
    current
        .iter()
        .zip(previous)
        .map(|(&c, &p)| {
            if c <= 0.0 {
                0.0
            } else {
                c * ((c + GUARD).ln() - (p + GUARD).ln())
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seeded_rng;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn identity_transform_is_bitwise_noop() {
        let d = vec![0.5, 0.5];
        let t = transform_distribution(&d, &SamplerConfig::identity());
        assert_eq!(t, d);
    }

    #[test]
    fn point_mass_survives_any_config() {
        let d = vec![0.0, 1.0, 0.0];
        for cfg in [
            SamplerConfig::new(0.1, 0.9).unwrap(),
            SamplerConfig::new(2.0, 0.3).unwrap(),
            SamplerConfig::identity(),
        ] {
            let t = transform_distribution(&d, &cfg);
            assert_eq!(t[1], 1.0);
            assert_eq!(t[0], 0.0);
            assert_eq!(t[2], 0.0);
            let mut rng = seeded_rng(1);
            assert_eq!(transform_sample(&d, &cfg, &mut rng), 1);
        }
    }

    #[test]
    fn nucleus_truncation_example() {
        // prefix {0.6, 0.3} reaches 0.9; third token is dropped
        let d = vec![0.6, 0.3, 0.1];
        let cfg = SamplerConfig::new(1.0, 0.9).unwrap();
        let t = transform_distribution(&d, &cfg);
        assert!((t[0] - 2.0 / 3.0).abs() < TOL);
        assert!((t[1] - 1.0 / 3.0).abs() < TOL);
        assert_eq!(t[2], 0.0);
    }

    #[test]
    fn temperature_sharpens() {
        let d = vec![0.6, 0.4];
        let cfg = SamplerConfig::new(0.5, 1.0).unwrap();
        let t = transform_distribution(&d, &cfg);
        // p^2 renormalized: 0.36 / 0.52, 0.16 / 0.52
        assert!((t[0] - 0.36 / 0.52).abs() < TOL);
        assert!((t[1] - 0.16 / 0.52).abs() < TOL);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let d = vec![0.25, 0.25, 0.25, 0.25];
        let cfg = SamplerConfig::default();
        let a: Vec<usize> = (0..32)
            .map(|_| transform_sample(&d, &cfg, &mut seeded_rng(7)))
            .collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn entropy_basics() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < TOL);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let d = vec![0.3, 0.7];
        assert_eq!(kl_divergence_guarded(&d, &d), 0.0);
    }

    proptest! {
        #[test]
        fn transform_preserves_distribution_validity(
            raw in proptest::collection::vec(0.01f64..1.0, 2..6),
            temp in 0.05f64..4.0,
            top_p in 0.05f64..1.0,
        ) {
            let total: f64 = raw.iter().sum();
            let dist: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let cfg = SamplerConfig::new(temp, top_p).unwrap();
            let t = transform_distribution(&dist, &cfg);
            let sum: f64 = t.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(t.iter().all(|&p| p >= 0.0));
            // support never grows
            for (a, b) in dist.iter().zip(&t) {
                if *a == 0.0 {
                    prop_assert_eq!(*b, 0.0);
                }
            }
        }
    }
}
