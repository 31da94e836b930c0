//! Uncertainty-gated temporal ensembling of per-sample loss weights.
//!
//! A sample whose prediction entropy is below the threshold blends its fresh
//! weights with the pair stored at its previous visit:
//! `ε·previous + (1 - ε)·fresh`. Uncertain samples, and samples seen for the
//! first time, take the fresh pair. Whatever is returned becomes the stored pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::check_distributions;
use crate::autodiff::Tensor;

/// Per-sample coefficients for the soft-label (`beta`) and hint (`gamma`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub beta: f64,
    pub gamma: f64,
}

impl WeightPair {
    /// Fixed coefficients of conventional distillation.
    pub const UNIT: WeightPair = WeightPair { beta: 1.0, gamma: 1.0 };

    pub fn within(&self, lower: f64, upper: f64) -> bool {
        (lower..=upper).contains(&self.beta) && (lower..=upper).contains(&self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub epsilon: f64,
    pub threshold: f64,
    /// Divide the entropy by `ln C` before comparing it with the threshold.
    pub normalize_entropy: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            threshold: 0.6,
            normalize_entropy: true,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("ensemble.epsilon", "must lie in [0, 1]"));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::config("ensemble.threshold", "must be non-negative"));
        }
        Ok(())
    }
}

/// Shannon entropy of `probs`, optionally divided by `ln C`.
pub fn uncertainty(probs: &[f64], normalize: bool) -> Result<f64> {
    check_distributions(&Tensor::new(vec![1, probs.len()], probs.to_vec())?, "uncertainty input")?;
    Ok(entropy(probs, normalize))
}

pub(crate) fn entropy(probs: &[f64], normalize: bool) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    if normalize && probs.len() > 1 {
        h / (probs.len() as f64).ln()
    } else {
        h
    }
}

/// Weights derived from uncertainty alone, without a meta network:
/// `β = γ = 1 - l + 2l·u` for normalized entropy `u`.
pub fn uncertainty_weights(normalized_uncertainty: f64, range: f64) -> WeightPair {
    let w = 1.0 - range + 2.0 * range * normalized_uncertainty.clamp(0.0, 1.0);
    WeightPair { beta: w, gamma: w }
}

/// Stored pair and visit step for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoredWeights {
    pub weights: WeightPair,
    pub step: u64,
}

/// Previous-visit weights keyed by stable sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<u64, StoredWeights>,
}

fn blend(eps: f64, previous: f64, fresh: f64) -> f64 {
    let v = eps * previous + (1.0 - eps) * fresh;
    // a convex combination; clamp only removes rounding past the endpoints
    v.clamp(previous.min(fresh), previous.max(fresh))
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: u64) -> Option<StoredWeights> {
        self.entries.get(&sample_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, StoredWeights)> + '_ {
        self.entries.iter().map(|(&id, &s)| (id, s))
    }

    /// Restores an entry, for example from a checkpoint.
    pub fn insert(&mut self, sample_id: u64, stored: StoredWeights) -> Result<()> {
        if let Some(old) = self.entries.get(&sample_id) {
            if stored.step <= old.step {
                return Err(Error::contract(format!(
                    "sample {sample_id}: step {} is not newer than stored step {}",
                    stored.step, old.step
                )));
            }
        }
        self.entries.insert(sample_id, stored);
        Ok(())
    }

    /// Ensembles `fresh` for one sample at visit `step` and records the result.
    pub fn ensemble(
        &mut self,
        sample_id: u64,
        fresh: WeightPair,
        uncertainty: f64,
        step: u64,
        config: &EnsembleConfig,
    ) -> Result<WeightPair> {
        let previous = self.entries.get(&sample_id).copied();
        if let Some(prev) = previous {
            if step <= prev.step {
                return Err(Error::contract(format!(
                    "sample {sample_id}: step {step} is not newer than stored step {}",
                    prev.step
                )));
            }
        }
        let out = match previous {
            Some(prev) if uncertainty < config.threshold => WeightPair {
                beta: blend(config.epsilon, prev.weights.beta, fresh.beta),
                gamma: blend(config.epsilon, prev.weights.gamma, fresh.gamma),
            },
            _ => fresh,
        };
        self.entries.insert(
            sample_id,
            StoredWeights {
                weights: out,
                step,
            },
        );
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnsembleConfig {
        EnsembleConfig::default()
    }

    fn seeded(prev: WeightPair) -> WeightStore {
        let mut s = WeightStore::new();
        s.ensemble(7, prev, 1.0, 0, &cfg()).unwrap();
        s
    }

    #[test]
    fn confident_sample_blends_with_history() {
        let mut s = seeded(WeightPair { beta: 1.2, gamma: 0.9 });
        let out = s.ensemble(7, WeightPair { beta: 0.8, gamma: 1.1 }, 0.3, 1, &cfg()).unwrap();
        assert!((out.beta - 1.0).abs() < 1e-15 && (out.gamma - 1.0).abs() < 1e-15);
        assert_eq!(s.get(7).unwrap().weights, out);
    }

    #[test]
    fn uncertain_sample_takes_fresh() {
        let mut s = seeded(WeightPair { beta: 1.2, gamma: 0.9 });
        let fresh = WeightPair { beta: 0.8, gamma: 1.1 };
        assert_eq!(s.ensemble(7, fresh, 0.7, 1, &cfg()).unwrap(), fresh);
        // the threshold itself counts as uncertain
        assert_eq!(s.ensemble(7, WeightPair::UNIT, 0.6, 2, &cfg()).unwrap(), WeightPair::UNIT);
    }

    #[test]
    fn first_visit_takes_fresh_and_is_stored() {
        let mut s = WeightStore::new();
        let fresh = WeightPair { beta: 0.6, gamma: 1.4 };
        assert_eq!(s.ensemble(3, fresh, 0.0, 0, &cfg()).unwrap(), fresh);
        assert_eq!(s.get(3), Some(StoredWeights { weights: fresh, step: 0 }));
    }

    #[test]
    fn stale_step_is_rejected() {
        let mut s = seeded(WeightPair::UNIT);
        assert!(matches!(
            s.ensemble(7, WeightPair::UNIT, 0.1, 0, &cfg()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(uncertainty(&[1.0, 0.0, 0.0], true).unwrap(), 0.0);
        let u = uncertainty(&[0.25; 4], false).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        assert!((uncertainty(&[0.25; 4], true).unwrap() - 1.0).abs() < 1e-15);
        // -(0.7 ln 0.7 + 0.3 ln 0.3) / ln 2
        let u = uncertainty(&[0.7, 0.3], true).unwrap();
        assert!((u - 0.8812908992306927).abs() < 1e-15, "{u}");
        assert!(uncertainty(&[0.7, 0.7], true).is_err());
    }

    #[test]
    fn uncertainty_mapping_spans_range() {
        assert_eq!(uncertainty_weights(0.0, 0.5), WeightPair { beta: 0.5, gamma: 0.5 });
        assert_eq!(uncertainty_weights(1.0, 0.5), WeightPair { beta: 1.5, gamma: 1.5 });
        assert_eq!(uncertainty_weights(0.3, 0.0), WeightPair::UNIT);
    }
}
