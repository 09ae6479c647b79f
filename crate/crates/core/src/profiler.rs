//! Offline profiling of a draft/target pair with every chunk offloaded.
//!
//! Produces the confidence cut-off (mean confidence of fully accepted
//! chunks), the sorted sample of chunk importances that budgets are mapped
//! through, and the acceptance parameter alpha of a capped geometric fitted
//! to the mean number of tokens each verification yields.

use std::path::Path;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::stream_rng;
use crate::clock::SimClock;
use crate::cloud::{CloudConfig, CloudError, CloudRuntime, ComputeCostModel};
use crate::device::{run_session, DeviceError, DeviceOptions, DeviceSession, OffloadMode};
use crate::models::{ImportanceProvider, LanguageModel};
use crate::policy::OffloadPolicyState;
use crate::transport::{ChannelModel, SimCarrier, TransportError};
use crate::types::{SessionConfig, SessionId, TokenId};

/// Confidence cut-off used when no chunk was fully accepted.
pub const FALLBACK_C_TH: f64 = 0.8;
pub const ALPHA_MIN: f64 = 1e-6;
pub const ALPHA_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("importance sample is empty")]
    EmptyCdf,
    #[error("mean accepted count {e} outside [1, {max}]")]
    EOutOfRange { e: f64, max: f64 },
    #[error("budget {0} outside [0, 1]")]
    Budget(f64),
    #[error("draft vocabulary {draft} differs from target vocabulary {target}")]
    VocabMismatch { draft: usize, target: usize },
    #[error("no chunks were verified")]
    NoChunks,
    #[error("no importance provider given")]
    NoImportance,
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub c_th: f64,
    /// Chunk importances, ascending.
    pub importance_cdf: Vec<f64>,
    pub alpha: f64,
    pub gamma: usize,
    /// Mean tokens produced per verification (accepted plus correction).
    pub mean_emitted: f64,
    pub chunks: usize,
    pub fully_accepted: usize,
    pub provenance: String,
}

impl ProfileResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(r)
    }

    /// Policy state for `budget`, other knobs taken from `base`.
    pub fn policy(&self, budget: f64, base: &OffloadPolicyState) -> Result<OffloadPolicyState, ProfileError> {
        Ok(OffloadPolicyState {
            c_th: self.c_th,
            i_th: budget_to_ith(self, budget)?,
            budget,
            ..base.clone()
        })
    }
}

/// Linear-interpolation quantile of an ascending sample: position
/// `q * (n - 1)` between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Importance cut-off for an offload budget: the `(1 - budget)` quantile of
/// the chunk-importance sample. Budget 0 gives `+inf`, which disables
/// offloading.
pub fn budget_to_ith(profile: &ProfileResult, budget: f64) -> Result<f64, ProfileError> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(ProfileError::Budget(budget));
    }
    if profile.importance_cdf.is_empty() {
        return Err(ProfileError::EmptyCdf);
    }
    if budget == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(quantile(&profile.importance_cdf, 1.0 - budget).expect("non-empty"))
}

/// Expected tokens per verification under a capped geometric acceptance
/// process: `sum_{j=0..=gamma} alpha^j`.
pub fn expected_emitted(alpha: f64, gamma: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for _ in 0..=gamma {
        sum += term;
        term *= alpha;
    }
    sum
}

/// Inverts [`expected_emitted`] by bisection.
pub fn calibrate_alpha(e: f64, gamma: usize) -> Result<f64, ProfileError> {
    let max = (gamma + 1) as f64;
    if !(e >= 1.0 - 1e-12 && e <= max + 1e-12) {
        return Err(ProfileError::EOutOfRange { e, max });
    }
    let f = |a: f64| expected_emitted(a, gamma) - e;
    if f(ALPHA_MIN) >= 0.0 {
        return Ok(ALPHA_MIN);
    }
    if f(ALPHA_MAX) <= 0.0 {
        return Ok(ALPHA_MAX);
    }
    let (mut lo, mut hi) = (ALPHA_MIN, ALPHA_MAX);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() < 1e-10 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Verified chunk as seen by the profiler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkObservation {
    pub len: usize,
    pub confidence: f64,
    pub importance: f64,
    pub accepted: usize,
}

/// Builds a profile from verified chunks. Acceptance statistics use only
/// full-length chunks; the importance sample uses every chunk.
pub fn summarize(chunks: &[ChunkObservation], gamma: usize, provenance: String) -> Result<ProfileResult, ProfileError> {
    if chunks.is_empty() {
        return Err(ProfileError::NoChunks);
    }
    let mut importance_cdf: Vec<f64> = chunks.iter().map(|c| c.importance).collect();
    importance_cdf.sort_by(f64::total_cmp);
    let full: Vec<&ChunkObservation> = chunks.iter().filter(|c| c.len == gamma).collect();
    let sample: Vec<&ChunkObservation> = if full.is_empty() { chunks.iter().collect() } else { full };
    let accepted: Vec<f64> = sample
        .iter()
        .filter(|c| c.accepted == c.len)
        .map(|c| c.confidence)
        .collect();
    let c_th = if accepted.is_empty() {
        warn!("no fully accepted chunks; using c_th = {FALLBACK_C_TH}");
        FALLBACK_C_TH
    } else {
        accepted.iter().sum::<f64>() / accepted.len() as f64
    };
    let mean_emitted = sample.iter().map(|c| (c.accepted + 1) as f64).sum::<f64>() / sample.len() as f64;
    let alpha = calibrate_alpha(mean_emitted.min((gamma + 1) as f64), gamma)?;
    Ok(ProfileResult {
        c_th,
        importance_cdf,
        alpha,
        gamma,
        mean_emitted,
        chunks: chunks.len(),
        fully_accepted: accepted.len(),
        provenance,
    })
}

/// Generates every prompt with all chunks offloaded over an instant link
/// to a zero-cost cloud, then summarizes the verdicts. Prompt `i` scores
/// importance with `importance[i % importance.len()]`.
pub fn profile(
    draft: Arc<dyn LanguageModel>,
    target: Arc<dyn LanguageModel>,
    importance: &[Arc<dyn ImportanceProvider>],
    prompts: &[Vec<TokenId>],
    config: &SessionConfig,
    options: &DeviceOptions,
    provenance: impl Into<String>,
) -> Result<ProfileResult, ProfileError> {
    if draft.vocab_size() != target.vocab_size() {
        return Err(ProfileError::VocabMismatch {
            draft: draft.vocab_size(),
            target: target.vocab_size(),
        });
    }
    if importance.is_empty() {
        return Err(ProfileError::NoImportance);
    }
    let options = DeviceOptions {
        offload: OffloadMode::Always,
        pi: false,
        ..options.clone()
    };
    let cloud_config = CloudConfig {
        cost: ComputeCostModel::zero(),
        ..Default::default()
    };
    let mut chunks = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let id = SessionId(i as u64);
        let cloud = CloudRuntime::new(
            target.clone(),
            cloud_config.clone(),
            stream_rng(config.seed, 1 << 40 | i as u64),
        )?;
        let mut carrier = SimCarrier::new(cloud, ChannelModel::instant(), config.seed)?;
        let mut device = DeviceSession::seeded(
            id,
            prompt.clone(),
            config.clone(),
            OffloadPolicyState::default(),
            options.clone(),
            draft.clone(),
            importance[i % importance.len()].clone(),
        )?;
        run_session(&mut device, &mut carrier, &mut SimClock::default())?;
        chunks.extend(device.offloads().iter().filter_map(|o| {
            o.accepted.map(|accepted| ChunkObservation {
                len: o.len,
                confidence: o.chunk_confidence,
                importance: o.chunk_importance,
                accepted,
            })
        }));
    }
    summarize(&chunks, config.gamma, provenance.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cdf(v: Vec<f64>) -> ProfileResult {
        ProfileResult {
            c_th: 0.8,
            importance_cdf: v,
            alpha: 0.5,
            gamma: 4,
            mean_emitted: 1.9375,
            chunks: 0,
            fully_accepted: 0,
            provenance: String::new(),
        }
    }

    #[test]
    fn budget_examples() {
        let p = cdf((1..=100).map(f64::from).collect());
        assert!((budget_to_ith(&p, 0.2).unwrap() - 80.2).abs() < 1e-9);
        assert_eq!(budget_to_ith(&p, 1.0).unwrap(), 1.0);
        assert_eq!(budget_to_ith(&p, 0.0).unwrap(), f64::INFINITY);
        assert!(matches!(budget_to_ith(&cdf(vec![]), 0.5), Err(ProfileError::EmptyCdf)));
        assert!(budget_to_ith(&p, 1.5).is_err());
    }

    #[test]
    fn quantile_matches_sort_and_index() {
        let v: Vec<f64> = (0..11).map(|i| (i * i) as f64).collect();
        for i in 0..11 {
            assert_eq!(quantile(&v, i as f64 / 10.0).unwrap(), v[i]);
        }
        assert_eq!(quantile(&v, 0.05).unwrap(), 0.5);
    }

    #[test]
    fn calibrate_examples() {
        assert!((expected_emitted(0.5, 4) - 1.9375).abs() < 1e-15);
        assert!((calibrate_alpha(1.9375, 4).unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(calibrate_alpha(1.0, 4).unwrap(), ALPHA_MIN);
        assert_eq!(calibrate_alpha(5.0, 4).unwrap(), ALPHA_MAX);
        assert!(matches!(calibrate_alpha(0.5, 4), Err(ProfileError::EOutOfRange { .. })));
        assert!(matches!(calibrate_alpha(5.5, 4), Err(ProfileError::EOutOfRange { .. })));
    }

    #[test]
    fn summarize_fallback_and_mean() {
        let obs = |accepted, confidence| ChunkObservation {
            len: 4,
            confidence,
            importance: confidence,
            accepted,
        };
        let p = summarize(&[obs(0, 0.2), obs(1, 0.4)], 4, "t".into()).unwrap();
        assert_eq!(p.c_th, FALLBACK_C_TH);
        assert_eq!(p.mean_emitted, 1.5);
        let p = summarize(&[obs(4, 0.9), obs(4, 0.7), obs(0, 0.1)], 4, "t".into()).unwrap();
        assert!((p.c_th - 0.8).abs() < 1e-12);
        assert_eq!(p.importance_cdf, vec![0.1, 0.7, 0.9]);
        assert_eq!(p.fully_accepted, 2);
    }

    proptest! {
        #[test]
        fn calibrate_round_trip(alpha in 0.001f64..0.999, gamma in 1usize..=8) {
            let back = calibrate_alpha(expected_emitted(alpha, gamma), gamma).unwrap();
            prop_assert!((back - alpha).abs() < 1e-8, "{} vs {}", back, alpha);
        }

        #[test]
        fn budget_monotone(mut v in proptest::collection::vec(0.0f64..10.0, 1..50), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            v.sort_by(f64::total_cmp);
            let p = cdf(v);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(budget_to_ith(&p, lo).unwrap() >= budget_to_ith(&p, hi).unwrap());
        }
    }
}
