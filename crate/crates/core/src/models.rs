//! Deterministic language-model backends and importance providers.
//!
//! Backends stand in for the device (draft) and cloud (target) models. They
//! map a token prefix to a next-token distribution and can expose per-layer
//! provisional outputs for early exit.
//!
//! # File formats
//!
//! Distribution tables, one row per line, `#` starts a comment:
//!
//! ```text
//! # suffix_csv : prob_csv
//!  : 0.25,0.25,0.25,0.25
//! 2 : 0.7,0.1,0.1,0.1
//! 1,3 : 0.1,0.2,0.3,0.4
//! ```
//!
//! The row with an empty suffix is the mandatory default. Lookup picks the
//! longest suffix matching the end of the prefix.
//!
//! Corpora are whitespace-separated token ids. Importance traces hold one
//! `position score` pair per line.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::RngExt;
use rand_distr::{Distribution, Pareto, StandardNormal};
use thiserror::Error;

use crate::choice::{mix64, stream_rng};
use crate::types::{CoreError, TokenDistribution, TokenId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("distribution table has no default (empty-suffix) row")]
    MissingDefaultRow,
    #[error("corpus of {len} tokens is too short for order {n}")]
    CorpusTooShort { len: usize, n: usize },
    #[error("n-gram order must be >= 1")]
    InvalidOrder,
    #[error("position {0} not in importance trace")]
    PositionNotInTrace(usize),
    #[error("row has {found} probabilities, vocabulary has {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("layer count must be >= 1")]
    NoLayers,
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Provisional output of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSignal {
    /// 0-based; the final layer is `layer_count - 1`.
    pub layer_index: usize,
    pub top1: f64,
    pub top2: f64,
    pub margin: f64,
    pub provisional_dist: TokenDistribution,
}

impl LayerSignal {
    pub fn new(layer_index: usize, dist: TokenDistribution) -> Self {
        let (top1, top2) = dist.top2();
        Self {
            layer_index,
            top1,
            top2,
            margin: (top1 - top2).clamp(0.0, 1.0),
            provisional_dist: dist,
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Next-token distribution. Identical prefixes give identical results.
    fn distribution(&self, prefix: &[TokenId]) -> TokenDistribution;

    fn layer_count(&self) -> usize {
        1
    }

    /// One signal per layer, in order. The last one is always
    /// [`distribution`](Self::distribution).
    fn layer_signals(&self, prefix: &[TokenId]) -> Vec<LayerSignal> {
        vec![LayerSignal::new(0, self.distribution(prefix))]
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn distribution(&self, prefix: &[TokenId]) -> TokenDistribution {
        (**self).distribution(prefix)
    }
    fn layer_count(&self) -> usize {
        (**self).layer_count()
    }
    fn layer_signals(&self, prefix: &[TokenId]) -> Vec<LayerSignal> {
        (**self).layer_signals(prefix)
    }
}

/// Longest-suffix lookup table.
#[derive(Debug, Clone)]
pub struct TableLm {
    vocab: usize,
    rows: HashMap<Vec<TokenId>, TokenDistribution>,
    longest: usize,
}

impl TableLm {
    pub fn new(rows: impl IntoIterator<Item = (Vec<TokenId>, TokenDistribution)>) -> Result<Self, ModelError> {
        let rows: HashMap<_, _> = rows.into_iter().collect();
        let default = rows.get(&Vec::new()).ok_or(ModelError::MissingDefaultRow)?;
        let vocab = default.vocab_size();
        for (suffix, dist) in &rows {
            if dist.vocab_size() != vocab {
                return Err(ModelError::VocabMismatch {
                    expected: vocab,
                    found: dist.vocab_size(),
                });
            }
            if let Some(bad) = suffix.iter().find(|t| t.index() >= vocab) {
                return Err(ModelError::TokenOutOfVocab { token: bad.0, vocab });
            }
        }
        let longest = rows.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self { vocab, rows, longest })
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (suffix, probs) = line.split_once(':').ok_or_else(|| ModelError::Parse {
                line: i + 1,
                msg: "expected `suffix_csv : prob_csv`".into(),
            })?;
            let suffix = parse_csv::<u32>(suffix, i + 1)?.into_iter().map(TokenId).collect();
            let probs = parse_csv::<f64>(probs, i + 1)?;
            let dist = TokenDistribution::new(probs).map_err(|e| ModelError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            rows.push((suffix, dist));
        }
        Self::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes in the line format accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.rows.keys().collect();
        keys.sort();
        let mut out = String::new();
        for key in keys {
            let suffix: Vec<String> = key.iter().map(|t| t.0.to_string()).collect();
            let probs: Vec<String> = self.rows[key].probs().iter().map(|p| format!("{p:?}")).collect();
            out.push_str(&format!("{} : {}\n", suffix.join(","), probs.join(",")));
        }
        out
    }

    /// Random first-order table: one row per previous token plus a default.
    /// Larger `sharpness` gives peakier rows.
    pub fn random_bigram(vocab: usize, sharpness: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xb16);
        let row = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>().powf(sharpness) + 1e-6).collect();
            TokenDistribution::from_weights(w).expect("positive weights")
        };
        let mut rows = vec![(Vec::new(), row(&mut rng))];
        for prev in 0..vocab as u32 {
            rows.push((vec![TokenId(prev)], row(&mut rng)));
        }
        Self::new(rows).expect("generated table is valid")
    }

    /// Random first-order table whose rows are softmaxes of `scale * z`,
    /// `z` standard normal per entry. Rows vary from flat to peaked.
    pub fn random_softmax(vocab: usize, scale: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x50f7);
        let row = |rng: &mut rand_chacha::ChaCha8Rng| {
            let z: Vec<f64> = (0..vocab)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = z.iter().map(|x| (x - max).exp() + 1e-12).collect();
            TokenDistribution::from_weights(w).expect("positive weights")
        };
        let mut rows = vec![(Vec::new(), row(&mut rng))];
        for prev in 0..vocab as u32 {
            rows.push((vec![TokenId(prev)], row(&mut rng)));
        }
        Self::new(rows).expect("generated table is valid")
    }

    /// Adds `sigma * z` to every log-probability, `z` standard normal, and
    /// renormalizes. Keeps rows peaked while moving close calls.
    pub fn logit_noise(&self, sigma: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x10a1);
        let mut keys: Vec<&Vec<TokenId>> = self.rows.keys().collect();
        keys.sort();
        let rows: Vec<_> = keys
            .into_iter()
            .map(|suffix| {
                let logits: Vec<f64> = self.rows[suffix]
                    .probs()
                    .iter()
                    .map(|p| p.ln() + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w = logits.iter().map(|x| (x - max).exp() + 1e-12).collect();
                (
                    suffix.clone(),
                    TokenDistribution::from_weights(w).expect("positive weights"),
                )
            })
            .collect();
        Self::new(rows).expect("noisy table is valid")
    }

    /// Mixes every row with a random row: `(1 - mix) * row + mix * noise`.
    pub fn perturbed(&self, mix: f64, sharpness: f64, seed: u64) -> Self {
        let noise = Self::random_bigram(self.vocab, sharpness, seed);
        let rows = self.rows.iter().map(|(suffix, dist)| {
            let other = noise.lookup(suffix);
            let w = dist
                .probs()
                .iter()
                .zip(other.probs())
                .map(|(a, b)| (1.0 - mix) * a + mix * b)
                .collect();
            (
                suffix.clone(),
                TokenDistribution::from_weights(w).expect("mixture is positive"),
            )
        });
        Self::new(rows.collect::<Vec<_>>()).expect("perturbed table is valid")
    }

    fn lookup(&self, prefix: &[TokenId]) -> &TokenDistribution {
        let max = self.longest.min(prefix.len());
        for len in (0..=max).rev() {
            if let Some(d) = self.rows.get(&prefix[prefix.len() - len..]) {
                return d;
            }
        }
        &self.rows[&Vec::new()]
    }
}

impl LanguageModel for TableLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn distribution(&self, prefix: &[TokenId]) -> TokenDistribution {
        self.lookup(prefix).clone()
    }
}

/// Add-one smoothed n-gram model.
#[derive(Debug, Clone)]
pub struct NgramLm {
    n: usize,
    vocab: usize,
    context_counts: HashMap<Vec<TokenId>, Vec<u64>>,
    unigram: Vec<u64>,
}

impl NgramLm {
    pub fn new(corpus: &[TokenId], n: usize, vocab: usize) -> Result<Self, ModelError> {
        if n < 1 {
            return Err(ModelError::InvalidOrder);
        }
        if corpus.len() < n {
            return Err(ModelError::CorpusTooShort { len: corpus.len(), n });
        }
        if let Some(bad) = corpus.iter().find(|t| t.index() >= vocab) {
            return Err(ModelError::TokenOutOfVocab { token: bad.0, vocab });
        }
        let mut unigram = vec![0u64; vocab];
        for t in corpus {
            unigram[t.index()] += 1;
        }
        let mut context_counts: HashMap<Vec<TokenId>, Vec<u64>> = HashMap::new();
        if n > 1 {
            for window in corpus.windows(n) {
                let (ctx, next) = window.split_at(n - 1);
                context_counts.entry(ctx.to_vec()).or_insert_with(|| vec![0; vocab])[next[0].index()] += 1;
            }
        }
        Ok(Self {
            n,
            vocab,
            context_counts,
            unigram,
        })
    }

    pub fn parse_corpus(text: &str) -> Result<Vec<TokenId>, ModelError> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, w)| {
                w.parse::<u32>().map(TokenId).map_err(|e| ModelError::Parse {
                    line: i + 1,
                    msg: format!("token {w:?}: {e}"),
                })
            })
            .collect()
    }

    pub fn order(&self) -> usize {
        self.n
    }

    fn smoothed(&self, counts: Option<&[u64]>) -> TokenDistribution {
        let v = self.vocab as f64;
        let probs = match counts {
            Some(c) => {
                let total: u64 = c.iter().sum();
                c.iter().map(|&k| (k as f64 + 1.0) / (total as f64 + v)).collect()
            }
            None => vec![1.0 / v; self.vocab],
        };
        TokenDistribution::from_weights(probs).expect("smoothed counts are positive")
    }
}

impl LanguageModel for NgramLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn distribution(&self, prefix: &[TokenId]) -> TokenDistribution {
        let ctx = self.n - 1;
        if ctx == 0 || prefix.len() < ctx {
            return self.smoothed(Some(&self.unigram));
        }
        let key = &prefix[prefix.len() - ctx..];
        self.smoothed(self.context_counts.get(key).map(Vec::as_slice))
    }
}

/// Per-layer perturbation applied to provisional outputs. Layer `l` (0-based)
/// adds `amplitude * decay^l / V * u` to every entry, `u ~ U[0, 1)`, then
/// renormalizes. The final layer is never perturbed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub amplitude: f64,
    pub decay: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            decay: 0.6,
        }
    }
}

impl NoiseSchedule {
    pub fn scale(&self, layer_index: usize, layers: usize) -> f64 {
        if layer_index + 1 >= layers {
            0.0
        } else {
            self.amplitude * self.decay.powi(layer_index as i32)
        }
    }
}

/// Wraps a backend with simulated layer-by-layer stabilization.
pub struct LayeredLm<M> {
    base: M,
    layers: usize,
    schedule: NoiseSchedule,
    seed: u64,
}

impl<M: LanguageModel> LayeredLm<M> {
    pub fn new(base: M, layers: usize, schedule: NoiseSchedule, seed: u64) -> Result<Self, ModelError> {
        if layers < 1 {
            return Err(ModelError::NoLayers);
        }
        Ok(Self {
            base,
            layers,
            schedule,
            seed,
        })
    }

    pub fn base(&self) -> &M {
        &self.base
    }
}

impl<M: LanguageModel> fmt::Debug for LayeredLm<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LayeredLm")
            .field("layers", &self.layers)
            .field("schedule", &self.schedule)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl<M: LanguageModel> LanguageModel for LayeredLm<M> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn distribution(&self, prefix: &[TokenId]) -> TokenDistribution {
        self.base.distribution(prefix)
    }

    fn layer_count(&self) -> usize {
        self.layers
    }

    fn layer_signals(&self, prefix: &[TokenId]) -> Vec<LayerSignal> {
        let base = self.base.distribution(prefix);
        let v = base.vocab_size() as f64;
        (0..self.layers)
            .map(|l| {
                let scale = self.schedule.scale(l, self.layers);
                if scale == 0.0 {
                    return LayerSignal::new(l, base.clone());
                }
                let mut rng = stream_rng(prefix_hash(self.seed, prefix), l as u64);
                let w = base
                    .probs()
                    .iter()
                    .map(|&p| p + scale / v * rng.random::<f64>())
                    .collect();
                LayerSignal::new(l, TokenDistribution::from_weights(w).expect("positive"))
            })
            .collect()
    }
}

/// FNV-1a over the prefix, finalized with SplitMix64. Stable across
/// platforms and toolchains.
pub fn prefix_hash(seed: u64, prefix: &[TokenId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for t in prefix {
        for b in t.0.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    mix64(h)
}

/// Per-token importance score.
pub trait ImportanceProvider: Send + Sync {
    /// Score of the token at `position`; `seq` holds at least
    /// `position + 1` tokens.
    fn importance(&self, seq: &[TokenId], position: usize) -> Result<f64, ModelError>;
}

impl<P: ImportanceProvider + ?Sized> ImportanceProvider for Arc<P> {
    fn importance(&self, seq: &[TokenId], position: usize) -> Result<f64, ModelError> {
        (**self).importance(seq, position)
    }
}

/// `1 - H(p) / ln V` of the distribution that produced the token, in [0, 1].
pub fn entropy_importance(dist: &TokenDistribution) -> f64 {
    let v = dist.vocab_size();
    if v <= 1 {
        return 1.0;
    }
    (1.0 - dist.entropy() / (v as f64).ln()).clamp(0.0, 1.0)
}

/// Entropy surrogate evaluated with a reference model.
pub struct EntropyImportance<M> {
    model: M,
}

impl<M: LanguageModel> EntropyImportance<M> {
    pub fn new(model: M) -> Self {
        Self { model }
    }
}

impl<M: LanguageModel> ImportanceProvider for EntropyImportance<M> {
    fn importance(&self, seq: &[TokenId], position: usize) -> Result<f64, ModelError> {
        let end = position.min(seq.len());
        Ok(entropy_importance(&self.model.distribution(&seq[..end])))
    }
}

/// Recorded per-position scores.
#[derive(Debug, Clone, Default)]
pub struct TraceImportance {
    scores: HashMap<usize, f64>,
}

impl TraceImportance {
    pub fn new(scores: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            scores: scores.into_iter().collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut scores = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let err = |msg: &str| ModelError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let pos = parts
                .next()
                .and_then(|p| p.parse::<usize>().ok())
                .ok_or_else(|| err("expected `position score`"))?;
            let score = parts
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .ok_or_else(|| err("score must be a non-negative number"))?;
            scores.insert(pos, score);
        }
        Ok(Self { scores })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Long-tailed synthetic trace for positions `0..len`: Pareto type II
    /// (Lomax) samples with unit scale, i.e. `Pareto(1, shape) - 1`.
    pub fn lomax(len: usize, shape: f64, seed: u64) -> Self {
        let dist = Pareto::new(1.0, shape).expect("valid pareto parameters");
        let mut rng = stream_rng(seed, 0x1a4);
        Self::new((0..len).map(|p| (p, dist.sample(&mut rng) - 1.0)))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        let mut keys: Vec<_> = self.scores.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| self.scores[&k]).collect()
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.scores.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|k| format!("{k} {:?}\n", self.scores[&k]))
            .collect()
    }
}

impl ImportanceProvider for TraceImportance {
    fn importance(&self, _seq: &[TokenId], position: usize) -> Result<f64, ModelError> {
        self.scores
            .get(&position)
            .copied()
            .ok_or(ModelError::PositionNotInTrace(position))
    }
}

fn parse_csv<T: std::str::FromStr>(s: &str, line: usize) -> Result<Vec<T>, ModelError>
where
    T::Err: fmt::Display,
{
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim().parse::<T>().map_err(|e| ModelError::Parse {
                line,
                msg: format!("{:?}: {e}", x.trim()),
            })
        })
        .collect()
}
