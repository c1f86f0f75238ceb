//! Sample sizing and seeded benchmark selection.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{ClonePair, CorpusError, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub population_size: u64,
    pub confidence_level: f64,
    pub margin_of_error: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub balanced: bool,
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.population_size == 0 {
            return Err(CorpusError::InvalidSamplingSpec("population size must be positive".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(CorpusError::InvalidSamplingSpec(format!(
                "confidence level {} not in (0, 1)",
                self.confidence_level
            )));
        }
        if !(self.margin_of_error > 0.0 && self.margin_of_error < 1.0) {
            return Err(CorpusError::InvalidSamplingSpec(format!(
                "margin of error {} not in (0, 1)",
                self.margin_of_error
            )));
        }
        Ok(())
    }
}

const Z_TABLE: [(f64, f64); 3] = [
    (0.90, 1.6448536269514722),
    (0.95, 1.959963984540054),
    (0.99, 2.5758293035489004),
];

/// Two-sided critical value of the standard normal for `confidence_level`.
pub fn z_score(confidence_level: f64) -> f64 {
    for (level, z) in Z_TABLE {
        if (confidence_level - level).abs() < 1e-12 {
            return z;
        }
    }
    let normal = Normal::standard();
    normal.inverse_cdf(1.0 - (1.0 - confidence_level) / 2.0)
}

/// Cochran's sample size for a proportion (p = 0.5) with finite-population
/// correction, capped at the population size.
pub fn required_sample_size(spec: &SamplingSpec) -> Result<u64, CorpusError> {
    spec.validate()?;
    let z = z_score(spec.confidence_level);
    let e = spec.margin_of_error;
    let n0 = z * z * 0.25 / (e * e);
    let population = spec.population_size as f64;
    let corrected = n0 / (1.0 + (n0 - 1.0) / population);
    // Guard against 278.0000000001 style round-up.
    let n = (corrected - 1e-9).ceil().max(1.0) as u64;
    Ok(n.min(spec.population_size))
}

/// Class-balanced benchmark: `size / 2` clones and `size / 2` non-clones,
/// drawn without replacement and returned in a seeded shuffled order.
pub fn build_benchmark(pairs: &[ClonePair], size: usize, seed: u64) -> Result<Vec<ClonePair>, CorpusError> {
    if !size.is_multiple_of(2) {
        return Err(CorpusError::OddBenchmarkSize(size));
    }
    let half = size / 2;
    let clones: Vec<&ClonePair> = pairs.iter().filter(|p| p.label == Label::Clone).collect();
    let others: Vec<&ClonePair> = pairs.iter().filter(|p| p.label == Label::NotClone).collect();
    for (label, pool) in [(Label::Clone, &clones), (Label::NotClone, &others)] {
        if pool.len() < half {
            return Err(CorpusError::InsufficientClassCount {
                label,
                required: half,
                available: pool.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<ClonePair> = Vec::with_capacity(size);
    for pool in [&clones, &others] {
        let mut chosen = index::sample(&mut rng, pool.len(), half).into_vec();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|i| pool[i].clone()));
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Uniform sample of `n` pairs without replacement, in a seeded order.
pub fn sample_uniform(pairs: &[ClonePair], n: usize, seed: u64) -> Result<Vec<ClonePair>, CorpusError> {
    if n > pairs.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pairs.len(), n)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect())
}
