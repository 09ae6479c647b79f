//! Domain types shared by the device runtime, the cloud runtime and the wire
//! protocol.
//!
//! Positions are absolute, 0-based indices into the full sequence (prompt
//! included), so the device and the cloud can reason about KV-cache
//! boundaries without any translation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specdec::CompressedDistribution;

/// Normalization tolerance for [`TokenDistribution`].
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Tolerance for stored chunk aggregates against their recomputed values.
pub const AGGREGATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("distribution has {0} entries; a vocabulary needs at least one")]
    EmptyDistribution(usize),
    #[error("negative or non-finite probability {value} at index {index}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("cached_len {cached_len} + {uncached} uncached tokens != start_pos {start_pos}")]
    PositionMismatch {
        cached_len: usize,
        uncached: usize,
        start_pos: usize,
    },
    #[error("draft chunk is empty")]
    EmptyChunk,
    #[error("draft chunk holds {len} tokens, more than gamma = {gamma}")]
    ChunkTooLong { len: usize, gamma: usize },
    #[error("stored chunk aggregate {field} = {stored} but tokens give {recomputed}")]
    AggregateMismatch {
        field: &'static str,
        stored: f64,
        recomputed: f64,
    },
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
}

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// A normalized probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, CoreError> {
        if probs.is_empty() {
            return Err(CoreError::EmptyDistribution(0));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(CoreError::InvalidProbability { index, value });
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORM_TOLERANCE {
            return Err(CoreError::NotNormalized(total));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights. Fails if every weight is zero.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self, CoreError> {
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(CoreError::InvalidProbability { index, value });
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.is_empty() {
            return Err(CoreError::EmptyDistribution(0));
        }
        if total <= 0.0 {
            return Err(CoreError::NotNormalized(total));
        }
        for w in &mut weights {
            *w /= total;
        }
        Self::new(weights)
    }

    pub fn uniform(vocab: usize) -> Self {
        assert!(vocab > 0, "uniform distribution over an empty vocabulary");
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn one_hot(vocab: usize, token: TokenId) -> Self {
        assert!(token.index() < vocab);
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token.index()).copied().unwrap_or(0.0)
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Token ids sorted by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<u32> = (0..self.probs.len() as u32).collect();
        ids.sort_by(|&a, &b| {
            self.probs[b as usize]
                .total_cmp(&self.probs[a as usize])
                .then(a.cmp(&b))
        });
        ids.into_iter().map(TokenId).collect()
    }

    /// Top-1 probability.
    pub fn confidence(&self) -> f64 {
        self.probs[self.argmax().index()]
    }

    /// (top-1, top-2) probabilities. A single-entry vocabulary has top-2 = 0.
    pub fn top2(&self) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = 0.0;
        for &p in &self.probs {
            if p > first {
                second = first.max(0.0);
                first = p;
            } else if p > second {
                second = p;
            }
        }
        (first, second)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = CoreError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.probs
    }
}

/// How the device samples draft tokens. The same mode drives distribution
/// compression, so the transmitted entries always cover the drafted token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum SamplingMode {
    #[default]
    Top1,
    TopK {
        k: usize,
    },
    TopP {
        p: f64,
    },
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingMode::Top1 => write!(f, "top-1"),
            SamplingMode::TopK { k } => write!(f, "top-k({k})"),
            SamplingMode::TopP { p } => write!(f, "top-p({p})"),
        }
    }
}

/// Per-token draft distribution as carried in a chunk.
#[derive(Debug, Clone, PartialEq)]
pub enum DraftDist {
    Full(TokenDistribution),
    Compressed(CompressedDistribution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftToken {
    pub token: TokenId,
    /// Top-1 probability of the distribution the token was drafted from.
    pub confidence: f64,
    pub importance: f64,
    pub dist: DraftDist,
}

/// Up to gamma consecutive drafted tokens; the unit of offloading.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftChunk {
    pub session: SessionId,
    pub start_pos: usize,
    pub tokens: Vec<DraftToken>,
    pub chunk_confidence: f64,
    pub chunk_importance: f64,
}

impl DraftChunk {
    /// Builds a chunk and stores the mean confidence and importance.
    pub fn new(session: SessionId, start_pos: usize, tokens: Vec<DraftToken>) -> Self {
        let (chunk_confidence, chunk_importance) = aggregates(&tokens);
        Self {
            session,
            start_pos,
            tokens,
            chunk_confidence,
            chunk_importance,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.token).collect()
    }

    pub fn check(&self, gamma: usize) -> Result<(), CoreError> {
        if self.tokens.is_empty() {
            return Err(CoreError::EmptyChunk);
        }
        if self.tokens.len() > gamma {
            return Err(CoreError::ChunkTooLong {
                len: self.tokens.len(),
                gamma,
            });
        }
        self.check_aggregates()
    }

    pub fn check_aggregates(&self) -> Result<(), CoreError> {
        let (conf, imp) = aggregates(&self.tokens);
        for (field, stored, recomputed) in [
            ("chunk_confidence", self.chunk_confidence, conf),
            ("chunk_importance", self.chunk_importance, imp),
        ] {
            if (stored - recomputed).abs() > AGGREGATE_TOLERANCE {
                return Err(CoreError::AggregateMismatch {
                    field,
                    stored,
                    recomputed,
                });
            }
        }
        Ok(())
    }
}

fn aggregates(tokens: &[DraftToken]) -> (f64, f64) {
    if tokens.is_empty() {
        return (0.0, 0.0);
    }
    let n = tokens.len() as f64;
    let conf = tokens.iter().map(|t| t.confidence).sum::<f64>() / n;
    let imp = tokens.iter().map(|t| t.importance).sum::<f64>() / n;
    (conf, imp)
}

/// Cached prefix length, device-accepted tokens the cloud has not seen yet,
/// and the chunk awaiting verification.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationRequest {
    pub session: SessionId,
    pub cached_len: usize,
    pub uncached_accepted: Vec<TokenId>,
    pub pending: DraftChunk,
    /// Ask for a bonus token when every pending token is accepted. Off for
    /// the last chunk of a sequence.
    pub want_bonus: bool,
}

impl VerificationRequest {
    /// Tokens the cloud must forward: uncached accepted plus pending.
    pub fn forward_tokens(&self) -> usize {
        self.uncached_accepted.len() + self.pending.len()
    }
}

pub fn validate_request(req: &VerificationRequest) -> Result<(), CoreError> {
    if req.pending.is_empty() {
        return Err(CoreError::EmptyChunk);
    }
    if req.cached_len + req.uncached_accepted.len() != req.pending.start_pos {
        return Err(CoreError::PositionMismatch {
            cached_len: req.cached_len,
            uncached: req.uncached_accepted.len(),
            start_pos: req.pending.start_pos,
        });
    }
    Ok(())
}

/// Token the cloud appends after the accepted prefix: a correction on
/// rejection, or a bonus sample when the whole chunk was accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction {
    pub token: TokenId,
    pub bonus: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub session: SessionId,
    pub accepted_count: usize,
    pub correction: Option<Correction>,
    /// Target distributions, kept only when auditing.
    pub target_dists: Option<Vec<TokenDistribution>>,
}

impl VerificationResult {
    pub fn fully_accepted(&self, pending_len: usize) -> bool {
        self.accepted_count == pending_len
    }

    /// Number of tokens this verdict appends to the sequence.
    pub fn emitted(&self) -> usize {
        self.accepted_count + usize::from(self.correction.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Draft chunk length.
    pub gamma: usize,
    /// Number of tokens to generate after the prompt.
    pub max_len: usize,
    pub budget: f64,
    pub sampling: SamplingMode,
    /// Upper bound on tokens produced by parallel inference per offload.
    pub delta: usize,
    pub seq_exit_fraction: f64,
    pub seed: u64,
    pub eos: Option<TokenId>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            gamma: 4,
            max_len: 64,
            budget: 0.2,
            sampling: SamplingMode::Top1,
            delta: 8,
            seq_exit_fraction: 0.8,
            seed: 0,
            eos: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.gamma < 1 {
            return Err(CoreError::InvalidConfig("gamma must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(CoreError::InvalidConfig(format!(
                "budget {} outside [0, 1]",
                self.budget
            )));
        }
        if !(self.seq_exit_fraction > 0.0 && self.seq_exit_fraction <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "seq_exit_fraction {} outside (0, 1]",
                self.seq_exit_fraction
            )));
        }
        match self.sampling {
            SamplingMode::TopK { k: 0 } => Err(CoreError::InvalidConfig("top-k needs k >= 1".into())),
            SamplingMode::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(CoreError::InvalidConfig(format!("top-p threshold {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}
