//! Cloud runtime: a verification-aware scheduler over prefill and
//! verification requests, partial prefill with fixed-size chunking, and a
//! per-session cache registry.
//!
//! Prefill requests always run in their own iteration ahead of any queued
//! verification. A verification request is a partial prefill over tokens
//! whose prefix is already cached, so verification batches are flattened
//! and cut into fixed-size chunks.

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::ChoiceSource;
use crate::models::LanguageModel;
use crate::profiler::quantile;
use crate::specdec::{verify_draft_chunk, SpecError};
use crate::transport::{
    read_message, write_message, Hello, Payload, SeqCounter, SeqTracker, TransportError, VerifyResp,
};
use crate::types::{
    validate_request, CoreError, SamplingMode, SessionId, TokenDistribution, TokenId, VerificationRequest,
    VerificationResult,
};

pub const DEFAULT_CHUNK_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("{0}: no hello received")]
    UnknownSession(SessionId),
    #[error("{session}: vocabulary {device} does not match target vocabulary {cloud}")]
    VocabMismatch {
        session: SessionId,
        device: usize,
        cloud: usize,
    },
    #[error("{0}: unexpected {1} message")]
    UnexpectedMessage(SessionId, &'static str),
    #[error("{0}: verification already queued")]
    DuplicateRequest(SessionId),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error(transparent)]
    Invalid(#[from] CoreError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Simulated engine cost of one scheduler iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeCostModel {
    /// Seconds per token in a batched forward pass.
    pub per_token_forward_cost: f64,
    /// Seconds per iteration regardless of batch size.
    pub fixed_iteration_overhead: f64,
}

impl Default for ComputeCostModel {
    /// A batch-1 verification of 4 draft tokens plus the bonus position
    /// takes 0.4 s.
    fn default() -> Self {
        Self {
            per_token_forward_cost: 0.008,
            fixed_iteration_overhead: 0.36,
        }
    }
}

impl ComputeCostModel {
    pub fn zero() -> Self {
        Self {
            per_token_forward_cost: 0.0,
            fixed_iteration_overhead: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if !(self.per_token_forward_cost >= 0.0 && self.fixed_iteration_overhead >= 0.0) {
            return Err(CloudError::InvalidCostModel(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn iteration_time(&self, tokens: usize) -> f64 {
        self.fixed_iteration_overhead + self.per_token_forward_cost * tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    pub chunk_size: usize,
    pub cost: ComputeCostModel,
    /// Attach target distributions to verification results.
    pub keep_target_dists: bool,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            cost: ComputeCostModel::default(),
            keep_target_dists: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillRequest {
    pub session: SessionId,
    pub tokens: Vec<TokenId>,
    pub arrived_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedVerify {
    pub request: VerificationRequest,
    pub arrived_at: f64,
}

/// Pending work. A session sits in at most one queue: a verification that
/// arrives while its session's prefill is still queued is held back until
/// that prefill has run.
#[derive(Debug, Default, Clone)]
pub struct RequestPool {
    prefill_queue: VecDeque<PrefillRequest>,
    verify_queue: VecDeque<QueuedVerify>,
    deferred: HashMap<SessionId, VecDeque<QueuedVerify>>,
    active: HashSet<SessionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleIteration {
    Idle,
    PrefillBatch(Vec<PrefillRequest>),
    VerifyBatch(Vec<QueuedVerify>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Prefill,
    Verify,
}

impl RequestPool {
    pub fn push_prefill(&mut self, req: PrefillRequest) {
        self.active.insert(req.session);
        self.prefill_queue.push_back(req);
    }

    pub fn push_verify(&mut self, req: QueuedVerify) {
        let session = req.request.session;
        self.active.insert(session);
        if self.prefill_queue.iter().any(|p| p.session == session) {
            self.deferred.entry(session).or_default().push_back(req);
        } else {
            self.verify_queue.push_back(req);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.prefill_queue.is_empty() && self.verify_queue.is_empty() && self.deferred.is_empty()
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_queue.len()
    }

    pub fn verify_len(&self) -> usize {
        self.verify_queue.len()
    }

    pub fn is_active(&self, session: SessionId) -> bool {
        self.active.contains(&session)
    }

    pub fn retire(&mut self, session: SessionId) {
        self.active.remove(&session);
    }

    pub fn has_queued_verify(&self, session: SessionId) -> bool {
        self.verify_queue.iter().any(|q| q.request.session == session) || self.deferred.contains_key(&session)
    }

    /// Queued prefills first, all of them; otherwise every queued
    /// verification.
    pub fn schedule_next(&mut self) -> ScheduleIteration {
        if !self.prefill_queue.is_empty() {
            return ScheduleIteration::PrefillBatch(self.prefill_queue.drain(..).collect());
        }
        if !self.verify_queue.is_empty() {
            return ScheduleIteration::VerifyBatch(self.verify_queue.drain(..).collect());
        }
        ScheduleIteration::Idle
    }

    /// Releases verifications held back behind `session`'s prefill.
    pub fn prefill_done(&mut self, session: SessionId) {
        if self.prefill_queue.iter().any(|p| p.session == session) {
            return;
        }
        if let Some(held) = self.deferred.remove(&session) {
            self.verify_queue.extend(held);
        }
    }

    /// Sessions present in more than one queue (always empty).
    pub fn overlapping_sessions(&self) -> Vec<SessionId> {
        let pre: HashSet<_> = self.prefill_queue.iter().map(|p| p.session).collect();
        self.verify_queue
            .iter()
            .map(|q| q.request.session)
            .filter(|s| pre.contains(s))
            .collect()
    }
}

/// Tokens the cloud holds for a session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionCache {
    pub session: SessionId,
    cached_tokens: Vec<TokenId>,
}

impl SessionCache {
    pub fn new(session: SessionId) -> Self {
        Self {
            session,
            cached_tokens: Vec::new(),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cached_tokens.len()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.cached_tokens
    }

    pub fn extend(&mut self, tokens: impl IntoIterator<Item = TokenId>) {
        self.cached_tokens.extend(tokens);
    }
}

/// Splits `total` tokens into chunks of `size`; only the last may be short.
pub fn chunk_sizes(total: usize, size: usize) -> Vec<usize> {
    let size = size.max(1);
    let mut out = vec![size; total / size];
    if !total.is_multiple_of(size) {
        out.push(total % size);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrefillOutcome {
    /// Target distributions for each pending position, plus the bonus
    /// position when requested.
    Targets(Vec<TokenDistribution>),
    /// The request's cached_len disagreed with the registry.
    Resync { cached_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialPrefill {
    pub outcomes: Vec<PrefillOutcome>,
    pub chunks: Vec<usize>,
    pub tokens: usize,
    pub duration: f64,
}

/// Forwards each request's uncached and pending tokens, extending the
/// caches with the uncached tokens. Requests whose cached_len disagrees
/// with the registry are not forwarded.
pub fn execute_partial_prefill(
    batch: &[QueuedVerify],
    caches: &mut HashMap<SessionId, SessionCache>,
    engine: &dyn LanguageModel,
    config: &CloudConfig,
) -> PartialPrefill {
    let mut outcomes = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for q in batch {
        let req = &q.request;
        let cache = caches
            .entry(req.session)
            .or_insert_with(|| SessionCache::new(req.session));
        if req.cached_len != cache.cached_len() || validate_request(req).is_err() {
            outcomes.push(PrefillOutcome::Resync {
                cached_len: cache.cached_len(),
            });
            continue;
        }
        cache.extend(req.uncached_accepted.iter().copied());
        let mut context = cache.tokens().to_vec();
        let n = req.pending.len();
        let positions = n + usize::from(req.want_bonus);
        let mut dists = Vec::with_capacity(positions);
        for i in 0..positions {
            dists.push(engine.distribution(&context));
            if i < n {
                context.push(req.pending.tokens[i].token);
            }
        }
        tokens += req.forward_tokens();
        outcomes.push(PrefillOutcome::Targets(dists));
    }
    PartialPrefill {
        outcomes,
        chunks: chunk_sizes(tokens, config.chunk_size),
        tokens,
        duration: if tokens > 0 {
            config.cost.iteration_time(tokens)
        } else {
            0.0
        },
    }
}

/// Runs speculative verification and appends the accepted tokens and the
/// correction or bonus token to the cache.
pub fn verify_and_respond<R: ChoiceSource + ?Sized>(
    request: &VerificationRequest,
    mode: SamplingMode,
    targets: Vec<TokenDistribution>,
    cache: &mut SessionCache,
    keep_targets: bool,
    rng: &mut R,
) -> Result<VerificationResult, CloudError> {
    let mut result = verify_draft_chunk(&request.pending, mode, &targets, rng)?;
    cache.extend(request.pending.tokens[..result.accepted_count].iter().map(|t| t.token));
    if let Some(c) = result.correction {
        cache.extend([c.token]);
    }
    if keep_targets {
        result.target_dists = Some(targets);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub kind: IterationKind,
    pub started: f64,
    pub finished: f64,
    pub members: usize,
    pub tokens: usize,
    pub chunks: Vec<usize>,
    pub responses: Vec<(SessionId, Payload)>,
    /// Verification results in member order (verify iterations only).
    pub results: Vec<VerificationResult>,
}

/// Operational counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CloudStatus {
    pub requests_served: usize,
    pub prefills_served: usize,
    pub resyncs: usize,
    pub iterations: usize,
    pub prefill_iterations: usize,
    pub verify_iterations: usize,
    pub mean_batch_size: f64,
    pub mean_chunk_fill: f64,
    pub mean_latency: f64,
    pub p50_latency: f64,
    pub p99_latency: f64,
    /// Prefill iterations that ran while verifications were waiting.
    pub prefill_preemptions: usize,
    pub busy_time: f64,
    pub sessions_open: usize,
}

#[derive(Debug, Clone, Copy)]
struct SessionInfo {
    mode: SamplingMode,
}

pub struct CloudRuntime<R = ChaCha8Rng> {
    target: Arc<dyn LanguageModel>,
    config: CloudConfig,
    pool: RequestPool,
    caches: HashMap<SessionId, SessionCache>,
    sessions: HashMap<SessionId, SessionInfo>,
    rng: R,
    latencies: Vec<f64>,
    chunk_fill_sum: f64,
    chunk_count: usize,
    verify_members: usize,
    status: CloudStatus,
}

impl<R: ChoiceSource> CloudRuntime<R> {
    pub fn new(target: Arc<dyn LanguageModel>, config: CloudConfig, rng: R) -> Result<Self, CloudError> {
        config.cost.validate()?;
        Ok(Self {
            target,
            config,
            pool: RequestPool::default(),
            caches: HashMap::new(),
            sessions: HashMap::new(),
            rng,
            latencies: Vec::new(),
            chunk_fill_sum: 0.0,
            chunk_count: 0,
            verify_members: 0,
            status: CloudStatus::default(),
        })
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    pub fn pool(&self) -> &RequestPool {
        &self.pool
    }

    pub fn cache(&self, session: SessionId) -> Option<&SessionCache> {
        self.caches.get(&session)
    }

    pub fn has_work(&self) -> bool {
        !self.pool.prefill_queue.is_empty() || !self.pool.verify_queue.is_empty()
    }

    /// Per-request verification latencies (arrival to response), seconds.
    pub fn latencies(&self) -> &[f64] {
        &self.latencies
    }

    pub fn ingest(&mut self, session: SessionId, payload: Payload, now: f64) -> Result<(), CloudError> {
        match payload {
            Payload::Hello(Hello { vocab, mode, .. }) => {
                let cloud = self.target.vocab_size();
                if vocab as usize != cloud {
                    return Err(CloudError::VocabMismatch {
                        session,
                        device: vocab as usize,
                        cloud,
                    });
                }
                self.sessions.insert(session, SessionInfo { mode });
                self.caches.insert(session, SessionCache::new(session));
                Ok(())
            }
            Payload::PrefillReq { tokens } => {
                if !self.sessions.contains_key(&session) {
                    return Err(CloudError::UnknownSession(session));
                }
                self.pool.push_prefill(PrefillRequest {
                    session,
                    tokens,
                    arrived_at: now,
                });
                Ok(())
            }
            Payload::VerifyReq(mut request) => {
                if !self.sessions.contains_key(&session) {
                    return Err(CloudError::UnknownSession(session));
                }
                if self.pool.has_queued_verify(session) {
                    return Err(CloudError::DuplicateRequest(session));
                }
                request.session = session;
                request.pending.session = session;
                let vocab = self.target.vocab_size();
                if let Some(t) = request
                    .uncached_accepted
                    .iter()
                    .chain(request.pending.tokens.iter().map(|t| &t.token))
                    .find(|t| t.index() >= vocab)
                {
                    return Err(CoreError::TokenOutOfVocab { token: t.0, vocab }.into());
                }
                self.pool.push_verify(QueuedVerify {
                    request,
                    arrived_at: now,
                });
                Ok(())
            }
            Payload::Bye => {
                self.sessions.remove(&session);
                self.caches.remove(&session);
                self.pool.retire(session);
                Ok(())
            }
            other => Err(CloudError::UnexpectedMessage(session, other.name())),
        }
    }

    /// Runs one scheduler iteration starting at `now`. Responses are due at
    /// `report.finished`.
    pub fn step(&mut self, now: f64) -> Option<IterationReport> {
        match self.pool.schedule_next() {
            ScheduleIteration::Idle => None,
            ScheduleIteration::PrefillBatch(batch) => {
                if !self.pool.verify_queue.is_empty() {
                    self.status.prefill_preemptions += 1;
                }
                let tokens: usize = batch.iter().map(|p| p.tokens.len()).sum();
                let duration = self.config.cost.iteration_time(tokens);
                for p in &batch {
                    if let Some(cache) = self.caches.get_mut(&p.session) {
                        cache.extend(p.tokens.iter().copied());
                    }
                    self.pool.prefill_done(p.session);
                }
                self.status.prefills_served += batch.len();
                self.status.iterations += 1;
                self.status.prefill_iterations += 1;
                self.status.busy_time += duration;
                Some(IterationReport {
                    kind: IterationKind::Prefill,
                    started: now,
                    finished: now + duration,
                    members: batch.len(),
                    tokens,
                    chunks: Vec::new(),
                    responses: Vec::new(),
                    results: Vec::new(),
                })
            }
            ScheduleIteration::VerifyBatch(batch) => Some(self.run_verify(batch, now)),
        }
    }

    fn run_verify(&mut self, batch: Vec<QueuedVerify>, now: f64) -> IterationReport {
        let prefill = execute_partial_prefill(&batch, &mut self.caches, &*self.target, &self.config);
        let finished = now + prefill.duration;
        let mut responses = Vec::with_capacity(batch.len());
        let mut results = Vec::new();
        for (q, outcome) in batch.iter().zip(prefill.outcomes) {
            let session = q.request.session;
            match outcome {
                PrefillOutcome::Resync { cached_len } => {
                    debug!("{session}: cache desync, registry holds {cached_len}");
                    self.status.resyncs += 1;
                    responses.push((
                        session,
                        Payload::ResyncResp {
                            cached_len: cached_len as u64,
                        },
                    ));
                }
                PrefillOutcome::Targets(targets) => {
                    let mode = self.sessions.get(&session).map_or(SamplingMode::Top1, |s| s.mode);
                    let cache = self.caches.get_mut(&session).expect("created by partial prefill");
                    match verify_and_respond(
                        &q.request,
                        mode,
                        targets,
                        cache,
                        self.config.keep_target_dists,
                        &mut self.rng,
                    ) {
                        Ok(result) => {
                            responses.push((
                                session,
                                Payload::VerifyResp(VerifyResp {
                                    accepted: result.accepted_count as u32,
                                    correction: result.correction,
                                }),
                            ));
                            self.latencies.push(finished - q.arrived_at);
                            self.status.requests_served += 1;
                            results.push(result);
                        }
                        Err(e) => {
                            warn!("{session}: verification failed: {e}");
                            responses.push((
                                session,
                                Payload::ResyncResp {
                                    cached_len: cache.cached_len() as u64,
                                },
                            ));
                        }
                    }
                }
            }
        }
        for &c in &prefill.chunks {
            self.chunk_fill_sum += c as f64 / self.config.chunk_size.max(1) as f64;
            self.chunk_count += 1;
        }
        self.verify_members += batch.len();
        self.status.iterations += 1;
        self.status.verify_iterations += 1;
        self.status.busy_time += prefill.duration;
        IterationReport {
            kind: IterationKind::Verify,
            started: now,
            finished,
            members: batch.len(),
            tokens: prefill.tokens,
            chunks: prefill.chunks,
            responses,
            results,
        }
    }

    pub fn status(&self) -> CloudStatus {
        let mut s = self.status.clone();
        s.mean_batch_size = if s.verify_iterations > 0 {
            self.verify_members as f64 / s.verify_iterations as f64
        } else {
            0.0
        };
        s.mean_chunk_fill = if self.chunk_count > 0 {
            self.chunk_fill_sum / self.chunk_count as f64
        } else {
            0.0
        };
        let mut sorted = self.latencies.clone();
        sorted.sort_by(f64::total_cmp);
        s.mean_latency = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<f64>() / sorted.len() as f64
        };
        s.p50_latency = quantile(&sorted, 0.5).unwrap_or(0.0);
        s.p99_latency = quantile(&sorted, 0.99).unwrap_or(0.0);
        s.sessions_open = self.sessions.len();
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Sleep for the cost model's iteration time after each iteration.
    pub emulate_cost: bool,
    /// Return after this many connections have closed.
    pub max_connections: Option<usize>,
    /// Rewritten with the status JSON after every iteration.
    pub status_path: Option<PathBuf>,
}

enum Event {
    Opened(usize, std::net::TcpStream),
    Message(usize, crate::transport::WireMessage),
    Closed(usize),
}

/// Serves the wire protocol on `listener` until `max_connections` have
/// closed (forever if unset). One reader thread per connection feeds a
/// single scheduler loop.
pub fn serve<R: ChoiceSource>(
    listener: TcpListener,
    mut runtime: CloudRuntime<R>,
    options: ServeOptions,
) -> Result<CloudStatus, TransportError> {
    let (tx, rx) = mpsc::channel::<Event>();
    let origin = Instant::now();
    let now = || origin.elapsed().as_secs_f64();
    std::thread::spawn(move || {
        for (id, stream) in listener.incoming().enumerate() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let reader = match stream.try_clone() {
                Ok(r) => r,
                Err(e) => {
                    warn!("clone failed: {e}");
                    continue;
                }
            };
            if tx.send(Event::Opened(id, stream)).is_err() {
                return;
            }
            let tx = tx.clone();
            std::thread::spawn(move || {
                let mut reader = std::io::BufReader::new(reader);
                let mut seqs = SeqTracker::default();
                loop {
                    match read_message(&mut reader) {
                        Ok(Some(msg)) => {
                            if let Err(e) = seqs.check(&msg) {
                                warn!("connection {id}: {e}");
                                break;
                            }
                            if tx.send(Event::Message(id, msg)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            warn!("connection {id}: {e}");
                            break;
                        }
                    }
                }
                let _ = tx.send(Event::Closed(id));
            });
        }
    });

    let mut conns: HashMap<usize, std::net::TcpStream> = HashMap::new();
    let mut owner: HashMap<SessionId, usize> = HashMap::new();
    let mut out_seq = SeqCounter::default();
    let mut closed = 0usize;
    loop {
        let event = if runtime.has_work() {
            rx.try_recv().ok()
        } else {
            match rx.recv_timeout(Duration::from_millis(200)) {
                Ok(e) => Some(e),
                Err(mpsc::RecvTimeoutError::Timeout) => None,
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        };
        if let Some(event) = event {
            match event {
                Event::Opened(id, stream) => {
                    debug!("connection {id} opened");
                    conns.insert(id, stream);
                }
                Event::Message(id, msg) => {
                    owner.insert(msg.session, id);
                    if let Err(e) = runtime.ingest(msg.session, msg.payload, now()) {
                        warn!("connection {id}: {e}");
                        if let Some(s) = conns.get(&id) {
                            let _ = s.shutdown(std::net::Shutdown::Both);
                        }
                    }
                }
                Event::Closed(id) => {
                    conns.remove(&id);
                    let gone: Vec<SessionId> = owner.iter().filter(|(_, &c)| c == id).map(|(&s, _)| s).collect();
                    for s in gone {
                        owner.remove(&s);
                        let _ = runtime.ingest(s, Payload::Bye, now());
                    }
                    closed += 1;
                    debug!("connection {id} closed");
                    if options.max_connections.is_some_and(|m| closed >= m) {
                        break;
                    }
                }
            }
            continue;
        }
        let Some(report) = runtime.step(now()) else {
            continue;
        };
        if options.emulate_cost {
            let left = report.finished - now();
            if left > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(left));
            }
        }
        for (session, payload) in report.responses {
            let Some(stream) = owner.get(&session).and_then(|c| conns.get_mut(c)) else {
                continue;
            };
            let msg = out_seq.wrap(session, payload);
            if let Err(e) = write_message(stream, &msg) {
                warn!("{session}: write failed: {e}");
            }
        }
        if let Some(path) = &options.status_path {
            let json = serde_json::to_string_pretty(&runtime.status()).expect("status serializes");
            if let Err(e) = std::fs::write(path, json) {
                warn!("status file {}: {e}", path.display());
            }
        }
    }
    let status = runtime.status();
    info!("served {} verifications", status.requests_served);
    Ok(status)
}
