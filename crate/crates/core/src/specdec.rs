//! Draft-and-verify kernel and the distribution codec used before
//! transmission.
//!
//! The device draws each draft token from the distribution truncated by the
//! session's [`SamplingMode`]. That truncated distribution is exactly what
//! [`compress`] keeps, so verifying against the compressed entries gives the
//! same verdicts as verifying against the full vector the sampler used.

use thiserror::Error;

use crate::choice::ChoiceSource;
use crate::types::{
    Correction, DraftChunk, DraftDist, SamplingMode, SessionId, TokenDistribution, TokenId, VerificationResult,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("top-k with k = {k} exceeds vocabulary of size {vocab}")]
    KExceedsVocab { k: usize, vocab: usize },
    #[error("{tokens} draft tokens, {draft} draft distributions, {target} target distributions")]
    LengthMismatch { tokens: usize, draft: usize, target: usize },
    #[error("draft token {token} at offset {offset} is not among the transmitted entries")]
    DraftTokenNotInEntries { token: TokenId, offset: usize },
    #[error("distributions disagree on vocabulary size ({0} vs {1})")]
    VocabMismatch(usize, usize),
}

/// Truncated distribution: the highest-probability entries kept by a
/// sampling mode, with their original (unnormalized) probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDistribution {
    mode: SamplingMode,
    entries: Vec<(TokenId, f64)>,
    residual_mass: f64,
}

impl CompressedDistribution {
    /// Rebuilds from decoded entries; `residual_mass` is derived the same way
    /// [`compress`] derives it, so a round trip is exact.
    pub fn from_entries(mode: SamplingMode, entries: Vec<(TokenId, f64)>) -> Self {
        let residual_mass = residual(&entries);
        Self {
            mode,
            entries,
            residual_mass,
        }
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn residual_mass(&self) -> f64 {
        self.residual_mass
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.entries.iter().any(|&(t, _)| t == token)
    }

    /// The renormalized distribution the sampler drew from, spread over the
    /// full vocabulary.
    pub fn effective(&self, vocab: usize) -> Result<TokenDistribution, SpecError> {
        let mut w = vec![0.0; vocab];
        for &(t, p) in &self.entries {
            if t.index() >= vocab {
                return Err(SpecError::VocabMismatch(t.index() + 1, vocab));
            }
            w[t.index()] = p;
        }
        Ok(TokenDistribution::from_weights(w).expect("compressed entries carry positive mass"))
    }
}

fn residual(entries: &[(TokenId, f64)]) -> f64 {
    (1.0 - entries.iter().map(|&(_, p)| p).sum::<f64>()).clamp(0.0, 1.0)
}

/// Positive-probability entries kept by `mode`, sorted by descending
/// probability (ties by ascending id). Top-k is clamped to the support.
fn truncate(dist: &TokenDistribution, mode: SamplingMode) -> Vec<(TokenId, f64)> {
    let ranked = dist
        .ranked()
        .into_iter()
        .map(|t| (t, dist.prob(t)))
        .take_while(|&(_, p)| p > 0.0);
    match mode {
        SamplingMode::Top1 => ranked.take(1).collect(),
        SamplingMode::TopK { k } => ranked.take(k.max(1)).collect(),
        SamplingMode::TopP { p } => {
            let mut kept = Vec::new();
            let mut mass = 0.0;
            for entry in ranked {
                kept.push(entry);
                mass += entry.1;
                if mass >= p {
                    break;
                }
            }
            kept
        }
    }
}

pub fn compress(dist: &TokenDistribution, mode: SamplingMode) -> Result<CompressedDistribution, SpecError> {
    if let SamplingMode::TopK { k } = mode {
        if k > dist.vocab_size() {
            return Err(SpecError::KExceedsVocab {
                k,
                vocab: dist.vocab_size(),
            });
        }
    }
    Ok(CompressedDistribution::from_entries(mode, truncate(dist, mode)))
}

/// The distribution `sample` actually draws from under `mode`.
pub fn effective(dist: &TokenDistribution, mode: SamplingMode) -> TokenDistribution {
    let mut w = vec![0.0; dist.vocab_size()];
    for (t, p) in truncate(dist, mode) {
        w[t.index()] = p;
    }
    TokenDistribution::from_weights(w).expect("truncation keeps positive mass")
}

/// Top-1 returns the argmax (lowest id on ties) without randomness; top-k
/// and top-p draw from the renormalized truncation.
pub fn sample<R: ChoiceSource + ?Sized>(dist: &TokenDistribution, mode: SamplingMode, rng: &mut R) -> TokenId {
    let kept = truncate(dist, mode);
    let weights: Vec<f64> = kept.iter().map(|&(_, p)| p).collect();
    kept[rng.pick(&weights)].0
}

/// Speculative verification of drafted `tokens`.
///
/// `draft[i]` is the distribution token `i` was sampled from, `target[i]`
/// the target distribution at the same position. If `target` holds one
/// extra distribution, a fully accepted chunk gets a bonus token sampled
/// from it.
pub fn verify_chunk<R: ChoiceSource + ?Sized>(
    session: SessionId,
    tokens: &[TokenId],
    draft: &[TokenDistribution],
    target: &[TokenDistribution],
    rng: &mut R,
) -> Result<VerificationResult, SpecError> {
    let n = tokens.len();
    if draft.len() != n || !(target.len() == n || target.len() == n + 1) {
        return Err(SpecError::LengthMismatch {
            tokens: n,
            draft: draft.len(),
            target: target.len(),
        });
    }
    for (p, q) in draft.iter().zip(target) {
        if p.vocab_size() != q.vocab_size() {
            return Err(SpecError::VocabMismatch(p.vocab_size(), q.vocab_size()));
        }
    }
    for (i, &x) in tokens.iter().enumerate() {
        let p = draft[i].prob(x);
        let q = target[i].prob(x);
        // p == 0 cannot come from the sampler; reject rather than fail.
        let accept = p > 0.0 && rng.coin((q / p).min(1.0));
        if !accept {
            let token = sample_residual(&draft[i], &target[i], rng);
            return Ok(VerificationResult {
                session,
                accepted_count: i,
                correction: Some(Correction { token, bonus: false }),
                target_dists: None,
            });
        }
    }
    let correction = target.get(n).map(|q| Correction {
        token: TokenId(rng.pick(q.probs()) as u32),
        bonus: true,
    });
    Ok(VerificationResult {
        session,
        accepted_count: n,
        correction,
        target_dists: None,
    })
}

/// Samples from `normalize(max(0, q - p))`, falling back to `q` when the
/// residual vanishes (only reachable through rounding).
fn sample_residual<R: ChoiceSource + ?Sized>(p: &TokenDistribution, q: &TokenDistribution, rng: &mut R) -> TokenId {
    let w: Vec<f64> = q.probs().iter().zip(p.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    if w.iter().any(|&x| x > 0.0) {
        TokenId(rng.pick(&w) as u32)
    } else {
        TokenId(rng.pick(q.probs()) as u32)
    }
}

/// Verification against compressed draft distributions.
pub fn verify_with_compressed<R: ChoiceSource + ?Sized>(
    session: SessionId,
    tokens: &[TokenId],
    draft: &[CompressedDistribution],
    target: &[TokenDistribution],
    rng: &mut R,
) -> Result<VerificationResult, SpecError> {
    if draft.len() != tokens.len() {
        return Err(SpecError::LengthMismatch {
            tokens: tokens.len(),
            draft: draft.len(),
            target: target.len(),
        });
    }
    let vocab = target.first().map(TokenDistribution::vocab_size).unwrap_or(0);
    let mut effective = Vec::with_capacity(draft.len());
    for (offset, (c, &t)) in draft.iter().zip(tokens).enumerate() {
        if !c.contains(t) {
            return Err(SpecError::DraftTokenNotInEntries { token: t, offset });
        }
        effective.push(c.effective(vocab)?);
    }
    verify_chunk(session, tokens, &effective, target, rng)
}

/// Verifies a wire-level chunk. Full draft distributions are truncated by
/// `mode` first; target distributions are always truncated by `mode`.
pub fn verify_draft_chunk<R: ChoiceSource + ?Sized>(
    chunk: &DraftChunk,
    mode: SamplingMode,
    target: &[TokenDistribution],
    rng: &mut R,
) -> Result<VerificationResult, SpecError> {
    let tokens = chunk.token_ids();
    let target: Vec<TokenDistribution> = target.iter().map(|q| effective(q, mode)).collect();
    let all_compressed = chunk.tokens.iter().all(|t| matches!(t.dist, DraftDist::Compressed(_)));
    if all_compressed && !chunk.tokens.is_empty() {
        let draft: Vec<CompressedDistribution> = chunk
            .tokens
            .iter()
            .map(|t| match &t.dist {
                DraftDist::Compressed(c) => c.clone(),
                DraftDist::Full(_) => unreachable!(),
            })
            .collect();
        return verify_with_compressed(chunk.session, &tokens, &draft, &target, rng);
    }
    let vocab = target.first().map(TokenDistribution::vocab_size).unwrap_or(0);
    let mut draft = Vec::with_capacity(tokens.len());
    for t in &chunk.tokens {
        draft.push(match &t.dist {
            DraftDist::Full(d) => effective(d, mode),
            DraftDist::Compressed(c) => c.effective(vocab)?,
        });
    }
    verify_chunk(chunk.session, &tokens, &draft, &target, rng)
}
