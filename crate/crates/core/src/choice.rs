//! Discrete random choices.
//!
//! Every random decision in the pipeline (draft sampling, offload gates,
//! acceptance tests, residual resampling) goes through [`ChoiceSource`]
//! rather than raw uniform draws. Any `rand` generator is a choice source;
//! tests can also plug in a source that walks every branch of the choice
//! tree to compute exact output probabilities.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub trait ChoiceSource {
    /// `true` with probability `p`. Certain outcomes (`p <= 0`, `p >= 1`)
    /// must not consume randomness.
    fn coin(&mut self, p: f64) -> bool;

    /// Index drawn proportionally to non-negative `weights`. Zero-weight
    /// entries are never returned; a single positive entry is returned
    /// without consuming randomness.
    fn pick(&mut self, weights: &[f64]) -> usize;
}

impl<R: rand::Rng + ?Sized> ChoiceSource for R {
    fn coin(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            return true;
        }
        if p <= 0.0 || p.is_nan() {
            return false;
        }
        self.random::<f64>() < p
    }

    fn pick(&mut self, weights: &[f64]) -> usize {
        let mut positive = weights.iter().enumerate().filter(|(_, &w)| w > 0.0);
        let first = positive
            .next()
            .map(|(i, _)| i)
            .expect("pick needs at least one positive weight");
        if positive.next().is_none() {
            return first;
        }
        let total: f64 = weights.iter().filter(|&&w| w > 0.0).sum();
        let target = self.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = first;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
        last
    }
}

/// Deterministic generator for a (seed, stream) pair. Distinct streams give
/// independent sequences for the same seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
