//! Device-side generation loop.
//!
//! [`DeviceSession`] is a state machine: [`DeviceSession::resume`] drafts
//! chunks and returns the next message to send, and results come back
//! through [`DeviceSession::deliver`]. The same session runs under the
//! single-session driver [`run_session`], the multi-session event simulator
//! and a real socket, because time comes from an injected [`Clock`].

use std::collections::VecDeque;
use std::sync::Arc;

use log::{debug, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{stream_rng, ChoiceSource};
use crate::clock::Clock;
use crate::models::{ImportanceProvider, LanguageModel, ModelError};
use crate::policy::{decide_offload, layer_exit, seq_exit, Decision, GateMode, OffloadPolicyState, PolicyError};
use crate::specdec::{compress, sample, SpecError};
use crate::transport::{Carrier, Hello, Payload, VerifyResp};
use crate::types::{
    CoreError, Correction, DraftChunk, DraftDist, DraftToken, SamplingMode, SessionConfig, SessionId,
    TokenDistribution, TokenId, VerificationRequest, VerificationResult,
};

const PI_STREAM: u64 = 0x5049;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("alpha = {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("every position has confidence 1; no rejection position to predict")]
    DegenerateDistribution,
    #[error("result for {got} delivered to session {expected}")]
    SessionMismatch { expected: SessionId, got: SessionId },
    #[error("no verification request in flight")]
    NoRequestInFlight,
    #[error("verdict accepts {accepted} of {len} tokens")]
    InvalidVerdict { accepted: usize, len: usize },
    #[error("unexpected message: {0}")]
    UnexpectedMessage(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Forces or forbids offloading regardless of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadMode {
    #[default]
    Policy,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceOptions {
    pub pi: bool,
    pub early_exit: bool,
    pub compression: bool,
    pub gates: GateMode,
    pub offload: OffloadMode,
    /// Acceptance parameter used by rejection prediction.
    pub alpha: f64,
    /// Seconds to run the full draft model for one token.
    pub token_time: f64,
}

impl Default for DeviceOptions {
    fn default() -> Self {
        Self {
            pi: true,
            early_exit: true,
            compression: true,
            gates: GateMode::Both,
            offload: OffloadMode::Policy,
            alpha: 0.5,
            token_time: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenSource {
    Local,
    CloudAccepted,
    CloudCorrected,
    PiAdopted,
}

/// One committed token; one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub session: u64,
    pub position: usize,
    pub token: u32,
    pub timestamp: f64,
    pub source: TokenSource,
    /// Committed after the link to the cloud was lost.
    pub fallback: bool,
}

/// One offloaded chunk and its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRecord {
    pub start_pos: usize,
    pub len: usize,
    pub chunk_confidence: f64,
    pub chunk_importance: f64,
    pub sent_at: f64,
    pub resolved_at: Option<f64>,
    pub accepted: Option<usize>,
    pub bonus: bool,
    /// Branch tokens adopted after this verdict.
    pub adopted: usize,
    /// Part of the stall covered by the adopted branch tokens.
    pub masked: f64,
}

/// Per-session counters; one JSONL line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: u64,
    pub prompt_len: usize,
    pub generated: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub mean_tbt: f64,
    pub tokens_local: usize,
    pub tokens_cloud_accepted: usize,
    pub tokens_cloud_corrected: usize,
    pub tokens_pi_adopted: usize,
    pub tokens_fallback: usize,
    pub chunks_drafted: usize,
    /// Chunks the offload policy was consulted for.
    pub chunks_considered: usize,
    pub chunks_offloaded: usize,
    pub draft_tokens_offloaded: usize,
    pub draft_tokens_accepted: usize,
    pub predictions: usize,
    /// Verdicts whose rejection position matched the prediction.
    pub position_hits: usize,
    /// Branches adopted (position and correction matched).
    pub adoptions: usize,
    /// Device compute time hidden behind verification by adopted branches.
    pub masked_time: f64,
    /// Time from sending a request to learning its verdict, summed.
    pub stall_time: f64,
    pub resyncs: usize,
    pub fallback: bool,
    pub tokens_drafted: usize,
    pub layers_run: usize,
    pub layer_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionPrediction {
    pub r_star: usize,
    pub distribution: Vec<f64>,
}

/// Rejection-position distribution for a chunk: a capped geometric prior
/// scaled by `1 - c_t`, normalized.
pub fn rejection_distribution(confidences: &[f64], alpha: f64) -> Result<Vec<f64>, DeviceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DeviceError::InvalidAlpha(alpha));
    }
    let gamma = confidences.len();
    let adjusted: Vec<f64> = confidences
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let base = if t + 1 < gamma {
                (1.0 - alpha) * alpha.powi(t as i32)
            } else {
                alpha.powi(gamma as i32)
            };
            base * (1.0 - c).max(0.0)
        })
        .collect();
    let total: f64 = adjusted.iter().sum();
    if !(total > 0.0) {
        return Err(DeviceError::DegenerateDistribution);
    }
    Ok(adjusted.into_iter().map(|x| x / total).collect())
}

pub fn predict_rejection<R: ChoiceSource + ?Sized>(
    chunk: &DraftChunk,
    alpha: f64,
    rng: &mut R,
) -> Result<RejectionPrediction, DeviceError> {
    let conf: Vec<f64> = chunk.tokens.iter().map(|t| t.confidence).collect();
    let distribution = rejection_distribution(&conf, alpha)?;
    let r_star = rng.pick(&distribution);
    Ok(RejectionPrediction { r_star, distribution })
}

/// One drafted token and what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Drafted {
    pub token: TokenId,
    pub dist: TokenDistribution,
    pub layers_run: usize,
    pub cost: f64,
}

/// Draft-model decoding with optional layer-wise early exit.
#[derive(Clone)]
pub struct Drafter {
    pub model: Arc<dyn LanguageModel>,
    pub policy: OffloadPolicyState,
    pub early_exit: bool,
    pub token_time: f64,
    pub mode: SamplingMode,
}

impl Drafter {
    pub fn step<R: ChoiceSource + ?Sized>(&self, prefix: &[TokenId], rng: &mut R) -> Result<Drafted, DeviceError> {
        let layers = self.model.layer_count().max(1);
        let (dist, layers_run) = if self.early_exit && layers > 1 {
            let exit = layer_exit(&self.model.layer_signals(prefix), &self.policy)?;
            let run = exit.layers_run();
            (exit.dist, run)
        } else {
            (self.model.distribution(prefix), layers)
        };
        let token = sample(&dist, self.mode, rng);
        Ok(Drafted {
            token,
            dist,
            layers_run,
            cost: self.token_time * layers_run as f64 / layers as f64,
        })
    }
}

/// Speculative continuation built while a chunk is being verified.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub r_star: usize,
    pub alternative: TokenId,
    pub tokens: Vec<TokenId>,
    /// Virtual completion time of each continuation token.
    pub completions: Vec<f64>,
    pub layers_run: usize,
}

/// Replaces the drafted token at `r_star` with an alternative drawn from the
/// other top-3 candidates of its local distribution, then drafts up to
/// `delta` more tokens (stopping after `eos`). Token `j` of the
/// continuation completes at `start_time` plus the cost of tokens `0..=j`.
/// Returns `None` when there is no alternative candidate.
#[allow(clippy::too_many_arguments)]
pub fn parallel_continue<R: ChoiceSource + ?Sized>(
    committed: &[TokenId],
    chunk: &[TokenId],
    local_dists: &[TokenDistribution],
    prediction: &RejectionPrediction,
    drafter: &Drafter,
    delta: usize,
    eos: Option<TokenId>,
    start_time: f64,
    rng: &mut R,
) -> Result<Option<Branch>, DeviceError> {
    let r = prediction.r_star;
    let local = &local_dists[r];
    let candidates: Vec<TokenId> = local.ranked().into_iter().take(3).filter(|&t| t != chunk[r]).collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let mut weights: Vec<f64> = candidates.iter().map(|&t| local.prob(t)).collect();
    if weights.iter().all(|&w| w <= 0.0) {
        weights.iter_mut().for_each(|w| *w = 1.0);
    }
    let alternative = candidates[rng.pick(&weights)];
    let mut prefix: Vec<TokenId> = committed.iter().chain(&chunk[..r]).copied().collect();
    prefix.push(alternative);
    let mut branch = Branch {
        r_star: r,
        alternative,
        tokens: Vec::new(),
        completions: Vec::new(),
        layers_run: 0,
    };
    if Some(alternative) == eos {
        return Ok(Some(branch));
    }
    let mut t = start_time;
    for _ in 0..delta {
        let d = drafter.step(&prefix, rng)?;
        t += d.cost;
        prefix.push(d.token);
        branch.tokens.push(d.token);
        branch.completions.push(t);
        branch.layers_run += d.layers_run;
        if Some(d.token) == eos {
            break;
        }
    }
    Ok(Some(branch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeOutcome {
    /// Tokens appended from the verdict (accepted plus correction).
    pub committed: usize,
    /// Tokens appended from an adopted branch.
    pub adopted: usize,
}

/// What the session wants to do next.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Send(Payload),
    /// A verdict is outstanding; call `deliver` or `link_failed`.
    Await,
    Finished,
}

#[derive(Debug, Clone)]
struct InFlight {
    request: VerificationRequest,
    sent_at: f64,
    prediction: Option<RejectionPrediction>,
    branch: Option<Branch>,
}

pub struct DeviceSession<R> {
    id: SessionId,
    config: SessionConfig,
    policy: OffloadPolicyState,
    options: DeviceOptions,
    drafter: Drafter,
    importance: Arc<dyn ImportanceProvider>,
    prompt_len: usize,
    seq: Vec<TokenId>,
    records: Vec<TokenRecord>,
    offloads: Vec<OffloadRecord>,
    cloud_cached_len: usize,
    linked: bool,
    bye_sent: bool,
    fallback: bool,
    started: bool,
    ended: bool,
    outbox: VecDeque<Payload>,
    in_flight: Option<InFlight>,
    rng: R,
    pi_rng: ChaCha8Rng,
    summary: SessionSummary,
}

impl DeviceSession<ChaCha8Rng> {
    /// Session whose RNG streams derive from `config.seed` and the id.
    pub fn seeded(
        id: SessionId,
        prompt: Vec<TokenId>,
        config: SessionConfig,
        policy: OffloadPolicyState,
        options: DeviceOptions,
        draft: Arc<dyn LanguageModel>,
        importance: Arc<dyn ImportanceProvider>,
    ) -> Result<Self, DeviceError> {
        let rng = stream_rng(config.seed, id.0);
        Self::new(id, prompt, config, policy, options, draft, importance, rng)
    }
}

impl<R: ChoiceSource> DeviceSession<R> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: SessionId,
        prompt: Vec<TokenId>,
        config: SessionConfig,
        policy: OffloadPolicyState,
        options: DeviceOptions,
        draft: Arc<dyn LanguageModel>,
        importance: Arc<dyn ImportanceProvider>,
        rng: R,
    ) -> Result<Self, DeviceError> {
        config.validate()?;
        policy.validate()?;
        if options.pi && !(options.alpha > 0.0 && options.alpha < 1.0) {
            return Err(DeviceError::InvalidAlpha(options.alpha));
        }
        let vocab = draft.vocab_size();
        if let Some(t) = prompt.iter().chain(config.eos.iter()).find(|t| t.index() >= vocab) {
            return Err(CoreError::TokenOutOfVocab { token: t.0, vocab }.into());
        }
        let drafter = Drafter {
            model: draft,
            policy: policy.clone(),
            early_exit: options.early_exit,
            token_time: options.token_time,
            mode: config.sampling,
        };
        let summary = SessionSummary {
            session: id.0,
            prompt_len: prompt.len(),
            layer_count: drafter.model.layer_count(),
            ..Default::default()
        };
        Ok(Self {
            id,
            pi_rng: stream_rng(config.seed ^ PI_STREAM, id.0),
            config,
            policy,
            options,
            drafter,
            importance,
            prompt_len: prompt.len(),
            seq: prompt,
            records: Vec::new(),
            offloads: Vec::new(),
            cloud_cached_len: 0,
            linked: false,
            bye_sent: false,
            fallback: false,
            started: false,
            ended: false,
            outbox: VecDeque::new(),
            in_flight: None,
            rng,
            summary,
        })
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn policy(&self) -> &OffloadPolicyState {
        &self.policy
    }

    /// Prompt followed by every committed token.
    pub fn sequence(&self) -> &[TokenId] {
        &self.seq
    }

    pub fn generated_tokens(&self) -> &[TokenId] {
        &self.seq[self.prompt_len..]
    }

    pub fn generated(&self) -> usize {
        self.seq.len() - self.prompt_len
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn offloads(&self) -> &[OffloadRecord] {
        &self.offloads
    }

    pub fn summary(&self) -> &SessionSummary {
        &self.summary
    }

    pub fn is_fallback(&self) -> bool {
        self.fallback
    }

    /// Tokens the device believes the cloud has cached.
    pub fn cloud_cached_len(&self) -> usize {
        self.cloud_cached_len
    }

    pub fn in_flight_request(&self) -> Option<&VerificationRequest> {
        self.in_flight.as_ref().map(|f| &f.request)
    }

    pub fn speculative_branch(&self) -> Option<&Branch> {
        self.in_flight.as_ref().and_then(|f| f.branch.as_ref())
    }

    pub fn is_done(&self) -> bool {
        self.generated() >= self.config.max_len
            || (self.config.eos.is_some() && self.seq.last() == self.config.eos.as_ref() && self.generated() > 0)
    }

    fn remaining(&self) -> usize {
        self.config.max_len.saturating_sub(self.generated())
    }

    fn may_offload(&self) -> bool {
        match self.options.offload {
            OffloadMode::Never => false,
            OffloadMode::Always => true,
            OffloadMode::Policy => self.options.gates == GateMode::ConfOnly || self.policy.i_th.is_finite(),
        }
    }

    fn link(&mut self) {
        if self.linked {
            return;
        }
        self.linked = true;
        self.outbox.push_back(Payload::Hello(Hello {
            vocab: self.drafter.model.vocab_size() as u32,
            gamma: self.config.gamma as u32,
            mode: self.config.sampling,
            compressed: self.options.compression,
        }));
        self.outbox.push_back(Payload::PrefillReq {
            tokens: self.seq.clone(),
        });
        self.cloud_cached_len = self.seq.len();
    }

    fn commit(&mut self, token: TokenId, source: TokenSource, timestamp: f64) -> bool {
        if self.is_done() {
            return false;
        }
        self.records.push(TokenRecord {
            session: self.id.0,
            position: self.seq.len(),
            token: token.0,
            timestamp,
            source,
            fallback: self.fallback,
        });
        self.seq.push(token);
        let s = &mut self.summary;
        s.generated += 1;
        match source {
            TokenSource::Local => s.tokens_local += 1,
            TokenSource::CloudAccepted => s.tokens_cloud_accepted += 1,
            TokenSource::CloudCorrected => s.tokens_cloud_corrected += 1,
            TokenSource::PiAdopted => s.tokens_pi_adopted += 1,
        }
        if self.fallback {
            s.tokens_fallback += 1;
        }
        true
    }

    fn finish(&mut self, clock: &dyn Clock) {
        if self.ended {
            return;
        }
        self.ended = true;
        let s = &mut self.summary;
        s.end_time = clock.now();
        s.mean_tbt = if s.generated > 0 {
            (s.end_time - s.start_time) / s.generated as f64
        } else {
            0.0
        };
    }

    /// Advances until the session needs the network or is done.
    pub fn resume(&mut self, clock: &mut dyn Clock) -> Result<Step, DeviceError> {
        if !self.started {
            self.started = true;
            self.summary.start_time = clock.now();
            if self.may_offload() && !self.is_done() {
                self.link();
            }
        }
        loop {
            if let Some(p) = self.outbox.pop_front() {
                return Ok(Step::Send(p));
            }
            if self.in_flight.is_some() {
                return Ok(Step::Await);
            }
            if self.is_done() {
                if self.linked && !self.fallback && !self.bye_sent {
                    self.bye_sent = true;
                    self.finish(clock);
                    return Ok(Step::Send(Payload::Bye));
                }
                self.finish(clock);
                return Ok(Step::Finished);
            }
            if let Some(req) = self.draft_chunk(clock)? {
                return Ok(Step::Send(Payload::VerifyReq(req)));
            }
        }
    }

    /// Drafts one chunk; commits it locally or returns the request to send.
    fn draft_chunk(&mut self, clock: &mut dyn Clock) -> Result<Option<VerificationRequest>, DeviceError> {
        let step = self.generated();
        let n = self.config.gamma.min(self.remaining());
        let mut prefix = self.seq.clone();
        let mut tokens = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        let mut completions = Vec::with_capacity(n);
        for _ in 0..n {
            let d = self.drafter.step(&prefix, &mut self.rng)?;
            clock.spend(d.cost);
            completions.push(clock.now());
            self.summary.tokens_drafted += 1;
            self.summary.layers_run += d.layers_run;
            prefix.push(d.token);
            let importance = self.importance.importance(&prefix, prefix.len() - 1)?;
            let dist = if self.options.compression {
                DraftDist::Compressed(compress(&d.dist, self.config.sampling)?)
            } else {
                DraftDist::Full(d.dist.clone())
            };
            tokens.push(DraftToken {
                token: d.token,
                confidence: d.dist.confidence(),
                importance,
                dist,
            });
            dists.push(d.dist);
            if Some(d.token) == self.config.eos {
                break;
            }
        }
        let chunk = DraftChunk::new(self.id, self.seq.len(), tokens);
        self.summary.chunks_drafted += 1;

        let decision = if self.fallback {
            Decision::Retain
        } else {
            match self.options.offload {
                OffloadMode::Never => Decision::Retain,
                OffloadMode::Always => Decision::Offload,
                OffloadMode::Policy if seq_exit(step, &self.config) => Decision::Retain,
                OffloadMode::Policy => {
                    self.summary.chunks_considered += 1;
                    decide_offload(&chunk, &self.policy, self.options.gates, &mut self.rng)
                }
            }
        };

        if decision == Decision::Retain {
            for (t, at) in chunk.tokens.iter().zip(completions) {
                self.commit(t.token, TokenSource::Local, at);
            }
            return Ok(None);
        }

        self.link();
        let now = clock.now();
        let last = chunk.tokens.last().map(|t| t.token);
        let want_bonus = step + chunk.len() < self.config.max_len && last != self.config.eos;
        let request = VerificationRequest {
            session: self.id,
            cached_len: self.cloud_cached_len,
            uncached_accepted: self.seq[self.cloud_cached_len..].to_vec(),
            pending: chunk,
            want_bonus,
        };
        self.summary.chunks_offloaded += 1;
        self.summary.draft_tokens_offloaded += request.pending.len();
        self.offloads.push(OffloadRecord {
            start_pos: request.pending.start_pos,
            len: request.pending.len(),
            chunk_confidence: request.pending.chunk_confidence,
            chunk_importance: request.pending.chunk_importance,
            sent_at: now,
            resolved_at: None,
            accepted: None,
            bonus: false,
            adopted: 0,
            masked: 0.0,
        });

        let mut prediction = None;
        let mut branch = None;
        if self.options.pi {
            match predict_rejection(&request.pending, self.options.alpha, &mut self.pi_rng) {
                Ok(pred) => {
                    self.summary.predictions += 1;
                    let room = self.remaining().saturating_sub(pred.r_star + 1);
                    branch = parallel_continue(
                        &self.seq,
                        &request.pending.token_ids(),
                        &dists,
                        &pred,
                        &self.drafter,
                        self.config.delta.min(room),
                        self.config.eos,
                        now,
                        &mut self.pi_rng,
                    )?;
                    prediction = Some(pred);
                }
                Err(DeviceError::DegenerateDistribution) => {}
                Err(e) => return Err(e),
            }
        }
        self.in_flight = Some(InFlight {
            request: request.clone(),
            sent_at: now,
            prediction,
            branch,
        });
        Ok(Some(request))
    }

    /// Hands a message from the cloud to the session.
    pub fn deliver(
        &mut self,
        session: SessionId,
        payload: Payload,
        arrival: f64,
        clock: &mut dyn Clock,
    ) -> Result<(), DeviceError> {
        if session != self.id {
            return Err(DeviceError::SessionMismatch {
                expected: self.id,
                got: session,
            });
        }
        match payload {
            Payload::VerifyResp(VerifyResp { accepted, correction }) => {
                let result = VerificationResult {
                    session,
                    accepted_count: accepted as usize,
                    correction,
                    target_dists: None,
                };
                self.merge(&result, arrival, clock)?;
                Ok(())
            }
            Payload::ResyncResp { cached_len } => {
                let fl = self.in_flight.as_mut().ok_or(DeviceError::NoRequestInFlight)?;
                let cached_len = (cached_len as usize).min(fl.request.pending.start_pos);
                debug!("{}: resync to cached_len {cached_len}", self.id);
                self.summary.resyncs += 1;
                self.cloud_cached_len = cached_len;
                fl.request.cached_len = cached_len;
                fl.request.uncached_accepted = self.seq[cached_len..].to_vec();
                clock.wait_until(arrival);
                self.outbox.push_back(Payload::VerifyReq(fl.request.clone()));
                Ok(())
            }
            Payload::Hello(_) => Err(DeviceError::UnexpectedMessage("hello")),
            Payload::PrefillReq { .. } => Err(DeviceError::UnexpectedMessage("prefill request")),
            Payload::VerifyReq(_) => Err(DeviceError::UnexpectedMessage("verify request")),
            Payload::Bye => Err(DeviceError::UnexpectedMessage("bye")),
        }
    }

    /// Applies a verdict. Commits the accepted prefix and the correction,
    /// then the branch tokens finished by `arrival` if the branch predicted
    /// both the rejection position and the correction token.
    pub fn merge(
        &mut self,
        result: &VerificationResult,
        arrival: f64,
        clock: &mut dyn Clock,
    ) -> Result<MergeOutcome, DeviceError> {
        if result.session != self.id {
            return Err(DeviceError::SessionMismatch {
                expected: self.id,
                got: result.session,
            });
        }
        let len = match &self.in_flight {
            Some(fl) => fl.request.pending.len(),
            None => return Err(DeviceError::NoRequestInFlight),
        };
        let a = result.accepted_count;
        let invalid = a > len
            || (a < len && result.correction.is_none_or(|c| c.bonus))
            || (a == len && result.correction.is_some_and(|c| !c.bonus));
        if invalid {
            return Err(DeviceError::InvalidVerdict { accepted: a, len });
        }
        let fl = self.in_flight.take().expect("checked above");
        clock.wait_until(arrival);
        let now = clock.now();
        self.summary.stall_time += now - fl.sent_at;
        self.summary.draft_tokens_accepted += a;
        if let Some(rec) = self.offloads.last_mut() {
            rec.resolved_at = Some(now);
            rec.accepted = Some(a);
            rec.bonus = result.correction.is_some_and(|c| c.bonus);
        }

        let before = self.seq.len();
        for t in &fl.request.pending.tokens[..a] {
            self.commit(t.token, TokenSource::CloudAccepted, now);
        }
        if let Some(Correction { token, .. }) = result.correction {
            self.commit(token, TokenSource::CloudCorrected, now);
        }
        let committed = self.seq.len() - before;
        self.cloud_cached_len = self.seq.len();

        if let Some(pred) = &fl.prediction {
            if a < len && a == pred.r_star {
                self.summary.position_hits += 1;
            }
        }
        let mut adopted = 0;
        if let (Some(branch), Some(c)) = (&fl.branch, result.correction) {
            if a == branch.r_star && !c.bonus && c.token == branch.alternative {
                self.summary.adoptions += 1;
                let mut last_done = None;
                for (&tok, &done) in branch.tokens.iter().zip(&branch.completions) {
                    if done > now || !self.commit(tok, TokenSource::PiAdopted, now) {
                        break;
                    }
                    adopted += 1;
                    last_done = Some(done);
                }
                if let Some(done) = last_done {
                    self.summary.masked_time += done - fl.sent_at;
                    if let Some(rec) = self.offloads.last_mut() {
                        rec.adopted = adopted;
                        rec.masked = done - fl.sent_at;
                    }
                }
            }
        }
        Ok(MergeOutcome { committed, adopted })
    }

    /// The link to the cloud is gone: keep the in-flight draft and generate
    /// locally from now on.
    pub fn link_failed(&mut self, clock: &mut dyn Clock) {
        self.outbox.clear();
        if self.is_done() && self.in_flight.is_none() {
            return;
        }
        if !self.fallback {
            warn!("{}: link lost at {:.3}s, continuing locally", self.id, clock.now());
        }
        self.fallback = true;
        self.summary.fallback = true;
        if let Some(fl) = self.in_flight.take() {
            let now = clock.now();
            for t in &fl.request.pending.tokens {
                self.commit(t.token, TokenSource::Local, now);
            }
        }
    }
}

/// Drives one session over a carrier until it finishes. Carrier failures
/// switch the session to local generation.
pub fn run_session<R: ChoiceSource, C: Carrier + ?Sized>(
    device: &mut DeviceSession<R>,
    carrier: &mut C,
    clock: &mut dyn Clock,
) -> Result<(), DeviceError> {
    loop {
        match device.resume(clock)? {
            Step::Send(payload) => {
                if let Err(e) = carrier.send(device.id(), payload, clock.now()) {
                    debug!("{}: send failed: {e}", device.id());
                    device.link_failed(clock);
                }
            }
            Step::Await => match carrier.recv(clock.now()) {
                Ok(msg) => device.deliver(msg.session, msg.payload, msg.arrival, clock)?,
                Err(e) => {
                    debug!("{}: receive failed: {e}", device.id());
                    device.link_failed(clock);
                }
            },
            Step::Finished => return Ok(()),
        }
    }
}
