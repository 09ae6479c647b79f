//! Discrete-event simulation of many device sessions sharing one cloud.
//!
//! Each session owns a simulated clock that may run ahead of the global
//! event time while it drafts locally; every message it sends is stamped
//! with its own clock, so events stay causal. Each session has its own
//! uplink and downlink channel.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use log::warn;
use rand_chacha::ChaCha8Rng;

use crate::choice::stream_rng;
use crate::clock::{Clock, SimClock};
use crate::cloud::{CloudConfig, CloudError, CloudRuntime, CloudStatus, IterationKind};
use crate::device::{DeviceError, DeviceOptions, DeviceSession, OffloadRecord, SessionSummary, Step, TokenRecord};
use crate::models::{ImportanceProvider, LanguageModel};
use crate::policy::OffloadPolicyState;
use crate::transport::{decode, encode, ChannelModel, Received, SeqCounter, SimChannel, TransportError, WireMessage};
use crate::types::{SessionConfig, SessionId, TokenId};

const CLOUD_STREAM: u64 = 0xc10d;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub struct SimSession {
    pub id: SessionId,
    pub start: f64,
    pub prompt: Vec<TokenId>,
    pub importance: Arc<dyn ImportanceProvider>,
}

pub struct SimSetup {
    pub config: SessionConfig,
    pub policy: OffloadPolicyState,
    pub options: DeviceOptions,
    pub draft: Arc<dyn LanguageModel>,
    pub target: Arc<dyn LanguageModel>,
    pub channel: ChannelModel,
    pub cloud: CloudConfig,
    pub sessions: Vec<SimSession>,
    /// Every link is cut at this time.
    pub kill_at: Option<f64>,
    /// Check after every verdict that the cloud cache is a prefix of the
    /// device's committed sequence.
    pub audit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub summary: SessionSummary,
    pub records: Vec<TokenRecord>,
    pub offloads: Vec<OffloadRecord>,
    pub sequence: Vec<TokenId>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub kind: IterationKind,
    pub started: f64,
    pub finished: f64,
    pub members: usize,
    pub tokens: usize,
    pub chunks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub sessions: Vec<SessionOutcome>,
    pub cloud: CloudStatus,
    pub latencies: Vec<f64>,
    pub iterations: Vec<IterationLog>,
    pub audit_checks: usize,
    pub audit_violations: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

enum Kind {
    Start(usize),
    Ingress(usize, WireMessage),
    CloudStep,
    Reply(usize, Received),
    Kill,
}

struct Event {
    t: f64,
    n: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.n.cmp(&self.n))
    }
}

struct Sim {
    devices: Vec<DeviceSession<ChaCha8Rng>>,
    clocks: Vec<SimClock>,
    uplinks: Vec<SimChannel>,
    downlinks: Vec<SimChannel>,
    index: HashMap<SessionId, usize>,
    cloud: CloudRuntime<ChaCha8Rng>,
    queue: BinaryHeap<Event>,
    counter: u64,
    up_seq: SeqCounter,
    down_seq: SeqCounter,
    step_pending: bool,
    cloud_free_at: f64,
    kill_at: Option<f64>,
    audit: bool,
    out_iterations: Vec<IterationLog>,
    audit_checks: usize,
    audit_violations: usize,
    bytes_up: usize,
    bytes_down: usize,
}

impl Sim {
    fn push(&mut self, t: f64, kind: Kind) {
        self.counter += 1;
        self.queue.push(Event {
            t,
            n: self.counter,
            kind,
        });
    }

    fn killed(&self, t: f64) -> bool {
        self.kill_at.is_some_and(|k| t >= k)
    }

    fn drive(&mut self, i: usize) -> Result<(), SimError> {
        loop {
            let step = self.devices[i].resume(&mut self.clocks[i])?;
            match step {
                Step::Send(payload) => {
                    let now = self.clocks[i].now();
                    if self.killed(now) {
                        self.devices[i].link_failed(&mut self.clocks[i]);
                        continue;
                    }
                    let id = self.devices[i].id();
                    let bytes = encode(&self.up_seq.wrap(id, payload))?;
                    self.bytes_up += bytes.len();
                    let msg = decode(&bytes)?;
                    if let Some(at) = self.uplinks[i].transmit(bytes.len(), now)? {
                        self.push(at, Kind::Ingress(i, msg));
                    }
                }
                Step::Await | Step::Finished => return Ok(()),
            }
        }
    }

    fn schedule_step(&mut self, t: f64) {
        if !self.step_pending {
            self.step_pending = true;
            self.push(t.max(self.cloud_free_at), Kind::CloudStep);
        }
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        let t = ev.t;
        match ev.kind {
            Kind::Start(i) => {
                self.clocks[i] = SimClock::new(t);
                self.drive(i)?;
            }
            Kind::Ingress(i, msg) => {
                if self.killed(t) {
                    return Ok(());
                }
                if let Err(e) = self.cloud.ingest(msg.session, msg.payload, t) {
                    warn!("cloud rejected message from {}: {e}", msg.session);
                    self.clocks[i].wait_until(t);
                    self.devices[i].link_failed(&mut self.clocks[i]);
                    self.drive(i)?;
                    return Ok(());
                }
                self.schedule_step(t);
            }
            Kind::CloudStep => {
                self.step_pending = false;
                if let Some(report) = self.cloud.step(t) {
                    self.cloud_free_at = report.finished;
                    self.out_iterations.push(IterationLog {
                        kind: report.kind,
                        started: report.started,
                        finished: report.finished,
                        members: report.members,
                        tokens: report.tokens,
                        chunks: report.chunks.clone(),
                    });
                    for (session, payload) in report.responses {
                        let Some(&i) = self.index.get(&session) else {
                            continue;
                        };
                        let bytes = encode(&self.down_seq.wrap(session, payload))?;
                        self.bytes_down += bytes.len();
                        let msg = decode(&bytes)?;
                        if let Some(at) = self.downlinks[i].transmit(bytes.len(), report.finished)? {
                            self.push(
                                at,
                                Kind::Reply(
                                    i,
                                    Received {
                                        session: msg.session,
                                        payload: msg.payload,
                                        arrival: at,
                                    },
                                ),
                            );
                        }
                    }
                    self.schedule_step(report.finished);
                }
            }
            Kind::Reply(i, msg) => {
                if self.killed(t) || self.devices[i].in_flight_request().is_none() {
                    return Ok(());
                }
                self.devices[i].deliver(msg.session, msg.payload, msg.arrival, &mut self.clocks[i])?;
                if self.audit {
                    self.audit_checks += 1;
                    if let Some(cache) = self.cloud.cache(msg.session) {
                        if !self.devices[i].sequence().starts_with(cache.tokens()) {
                            self.audit_violations += 1;
                            warn!("{}: cloud cache is not a prefix of the device sequence", msg.session);
                        }
                    }
                }
                self.drive(i)?;
            }
            Kind::Kill => {
                for i in 0..self.devices.len() {
                    if self.devices[i].in_flight_request().is_some() {
                        self.clocks[i].wait_until(t);
                        self.devices[i].link_failed(&mut self.clocks[i]);
                        self.drive(i)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn simulate(setup: SimSetup) -> Result<SimOutput, SimError> {
    let n = setup.sessions.len();
    let mut devices = Vec::with_capacity(n);
    let mut uplinks = Vec::with_capacity(n);
    let mut downlinks = Vec::with_capacity(n);
    let mut index = HashMap::new();
    let mut starts = Vec::with_capacity(n);
    for (i, s) in setup.sessions.into_iter().enumerate() {
        index.insert(s.id, i);
        starts.push(s.start);
        devices.push(DeviceSession::seeded(
            s.id,
            s.prompt,
            setup.config.clone(),
            setup.policy.clone(),
            setup.options.clone(),
            setup.draft.clone(),
            s.importance,
        )?);
        uplinks.push(SimChannel::new(setup.channel, setup.config.seed ^ (2 * s.id.0))?);
        downlinks.push(SimChannel::new(setup.channel, setup.config.seed ^ (2 * s.id.0 + 1))?);
    }
    let cloud = CloudRuntime::new(setup.target, setup.cloud, stream_rng(setup.config.seed, CLOUD_STREAM))?;
    let mut sim = Sim {
        clocks: vec![SimClock::default(); n],
        devices,
        uplinks,
        downlinks,
        index,
        cloud,
        queue: BinaryHeap::new(),
        counter: 0,
        up_seq: SeqCounter::default(),
        down_seq: SeqCounter::default(),
        step_pending: false,
        cloud_free_at: f64::NEG_INFINITY,
        kill_at: setup.kill_at,
        audit: setup.audit,
        out_iterations: Vec::new(),
        audit_checks: 0,
        audit_violations: 0,
        bytes_up: 0,
        bytes_down: 0,
    };
    for (i, &t) in starts.iter().enumerate() {
        sim.push(t, Kind::Start(i));
    }
    if let Some(k) = setup.kill_at {
        sim.push(k, Kind::Kill);
    }
    let mut last = 0.0f64;
    loop {
        while let Some(ev) = sim.queue.pop() {
            last = last.max(ev.t);
            sim.handle(ev)?;
        }
        // Sessions still waiting lost a message; treat it as a dead link.
        let stuck: Vec<usize> = (0..n)
            .filter(|&i| sim.devices[i].in_flight_request().is_some())
            .collect();
        if stuck.is_empty() {
            break;
        }
        for i in stuck {
            warn!("{}: no reply, falling back", sim.devices[i].id());
            sim.clocks[i].wait_until(last);
            sim.devices[i].link_failed(&mut sim.clocks[i]);
            sim.drive(i)?;
        }
    }
    let cloud = sim.cloud.status();
    let latencies = sim.cloud.latencies().to_vec();
    let sessions = sim
        .devices
        .into_iter()
        .map(|d| SessionOutcome {
            summary: d.summary().clone(),
            records: d.records().to_vec(),
            offloads: d.offloads().to_vec(),
            prompt_len: d.summary().prompt_len,
            sequence: d.sequence().to_vec(),
        })
        .collect();
    Ok(SimOutput {
        sessions,
        cloud,
        latencies,
        iterations: sim.out_iterations,
        audit_checks: sim.audit_checks,
        audit_violations: sim.audit_violations,
        bytes_up: sim.bytes_up,
        bytes_down: sim.bytes_down,
    })
}
