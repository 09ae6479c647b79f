//! Device/cloud wire protocol and carriers.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! length  u32   bytes after this field
//! version u8    1
//! type    u8    1 Hello, 2 PrefillReq, 3 VerifyReq, 4 VerifyResp, 5 ResyncResp, 6 Bye
//! session u64
//! seq     u64   strictly increasing per session and direction
//! body
//! ```
//!
//! Bodies:
//!
//! ```text
//! Hello       vocab u32, gamma u32, mode, compressed u8
//! PrefillReq  n u32, n x token u32
//! VerifyReq   cached_len u64, n u32, n x token u32, start_pos u64,
//!             want_bonus u8, chunk_conf f64, chunk_imp f64,
//!             encoding u8 (0 full, 1 compressed), [mode if compressed],
//!             m u32, m x (token u32, conf f64, imp f64, dist)
//!   dist      full:       v u32, v x prob f64
//!             compressed: e u32, e x (token u32, prob f64)
//! VerifyResp  accepted u32, flags u8 (bit 0 correction, bit 1 bonus), token u32
//! ResyncResp  cached_len u64
//! Bye         empty
//! mode        tag u8 (0 top-1, 1 top-k, 2 top-p), k u32, p f64
//! ```
//!
//! Decoding is strict: non-canonical fields (unused mode parameters, stray
//! flag bits, trailing bytes) are rejected, so every decodable frame
//! re-encodes to the same bytes.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Instant;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{stream_rng, ChoiceSource};
use crate::cloud::CloudRuntime;
use crate::specdec::CompressedDistribution;
use crate::types::{
    Correction, DraftChunk, DraftDist, DraftToken, SamplingMode, SessionId, TokenDistribution, TokenId,
    VerificationRequest,
};

pub const PROTOCOL_VERSION: u8 = 1;
/// Length field plus version, type, session and seq.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 8;
const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("{session}: seq {got} after {last}")]
    SeqRegression { session: SessionId, last: u64, got: u64 },
    #[error("channel closed")]
    ChannelClosed,
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("no reply pending")]
    NoReply,
    #[error("peer error: {0}")]
    Peer(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hello {
    pub vocab: u32,
    pub gamma: u32,
    pub mode: SamplingMode,
    pub compressed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyResp {
    pub accepted: u32,
    pub correction: Option<Correction>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello(Hello),
    PrefillReq { tokens: Vec<TokenId> },
    VerifyReq(VerificationRequest),
    VerifyResp(VerifyResp),
    ResyncResp { cached_len: u64 },
    Bye,
}

impl Payload {
    pub fn type_code(&self) -> u8 {
        match self {
            Payload::Hello(_) => 1,
            Payload::PrefillReq { .. } => 2,
            Payload::VerifyReq(_) => 3,
            Payload::VerifyResp(_) => 4,
            Payload::ResyncResp { .. } => 5,
            Payload::Bye => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Payload::Hello(_) => "hello",
            Payload::PrefillReq { .. } => "prefill",
            Payload::VerifyReq(_) => "verify",
            Payload::VerifyResp(_) => "verify-resp",
            Payload::ResyncResp { .. } => "resync",
            Payload::Bye => "bye",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub session: SessionId,
    pub seq: u64,
    pub payload: Payload,
}

fn put_mode(out: &mut Vec<u8>, mode: SamplingMode) {
    let (tag, k, p) = match mode {
        SamplingMode::Top1 => (0u8, 0u32, 0.0f64),
        SamplingMode::TopK { k } => (1, k as u32, 0.0),
        SamplingMode::TopP { p } => (2, 0, p),
    };
    out.push(tag);
    out.extend_from_slice(&k.to_be_bytes());
    out.extend_from_slice(&p.to_bits().to_be_bytes());
}

fn put_tokens(out: &mut Vec<u8>, tokens: &[TokenId]) {
    out.extend_from_slice(&(tokens.len() as u32).to_be_bytes());
    for t in tokens {
        out.extend_from_slice(&t.0.to_be_bytes());
    }
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

/// Bytes used by one draft distribution inside a VerifyReq.
pub fn dist_payload_len(dist: &DraftDist) -> usize {
    match dist {
        DraftDist::Full(d) => 4 + 8 * d.vocab_size(),
        DraftDist::Compressed(c) => 4 + 12 * c.entries().len(),
    }
}

fn chunk_encoding(chunk: &DraftChunk) -> Result<Option<SamplingMode>, TransportError> {
    let mut mode = None;
    let mut full = false;
    for t in &chunk.tokens {
        match &t.dist {
            DraftDist::Full(_) => full = true,
            DraftDist::Compressed(c) => match mode {
                None => mode = Some(c.mode()),
                Some(m) if m == c.mode() => {}
                Some(_) => {
                    return Err(TransportError::Malformed(
                        "compressed distributions with different modes in one chunk".into(),
                    ))
                }
            },
        }
    }
    if full && mode.is_some() {
        return Err(TransportError::Malformed(
            "mixed full and compressed distributions in one chunk".into(),
        ));
    }
    Ok(mode)
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, TransportError> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&[0; 4]);
    out.push(PROTOCOL_VERSION);
    out.push(msg.payload.type_code());
    out.extend_from_slice(&msg.session.0.to_be_bytes());
    out.extend_from_slice(&msg.seq.to_be_bytes());
    match &msg.payload {
        Payload::Hello(h) => {
            out.extend_from_slice(&h.vocab.to_be_bytes());
            out.extend_from_slice(&h.gamma.to_be_bytes());
            put_mode(&mut out, h.mode);
            out.push(u8::from(h.compressed));
        }
        Payload::PrefillReq { tokens } => put_tokens(&mut out, tokens),
        Payload::VerifyReq(req) => {
            let chunk = &req.pending;
            let mode = chunk_encoding(chunk)?;
            out.extend_from_slice(&(req.cached_len as u64).to_be_bytes());
            put_tokens(&mut out, &req.uncached_accepted);
            out.extend_from_slice(&(chunk.start_pos as u64).to_be_bytes());
            out.push(u8::from(req.want_bonus));
            put_f64(&mut out, chunk.chunk_confidence);
            put_f64(&mut out, chunk.chunk_importance);
            match mode {
                None => out.push(0),
                Some(m) => {
                    out.push(1);
                    put_mode(&mut out, m);
                }
            }
            out.extend_from_slice(&(chunk.tokens.len() as u32).to_be_bytes());
            for t in &chunk.tokens {
                out.extend_from_slice(&t.token.0.to_be_bytes());
                put_f64(&mut out, t.confidence);
                put_f64(&mut out, t.importance);
                match &t.dist {
                    DraftDist::Full(d) => {
                        out.extend_from_slice(&(d.vocab_size() as u32).to_be_bytes());
                        for &p in d.probs() {
                            put_f64(&mut out, p);
                        }
                    }
                    DraftDist::Compressed(c) => {
                        out.extend_from_slice(&(c.entries().len() as u32).to_be_bytes());
                        for &(tok, p) in c.entries() {
                            out.extend_from_slice(&tok.0.to_be_bytes());
                            put_f64(&mut out, p);
                        }
                    }
                }
            }
        }
        Payload::VerifyResp(r) => {
            out.extend_from_slice(&r.accepted.to_be_bytes());
            let (flags, token) = match r.correction {
                None => (0u8, 0u32),
                Some(c) => (1 | if c.bonus { 2 } else { 0 }, c.token.0),
            };
            out.push(flags);
            out.extend_from_slice(&token.to_be_bytes());
        }
        Payload::ResyncResp { cached_len } => out.extend_from_slice(&cached_len.to_be_bytes()),
        Payload::Bye => {}
    }
    let len = out.len() - 4;
    if len > MAX_FRAME {
        return Err(TransportError::Malformed(format!("frame of {len} bytes")));
    }
    out[..4].copy_from_slice(&(len as u32).to_be_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        let end = self.pos.checked_add(n).ok_or(TransportError::TruncatedFrame)?;
        let s = self.buf.get(self.pos..end).ok_or(TransportError::TruncatedFrame)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TransportError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn flag(&mut self) -> Result<bool, TransportError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(malformed(format!("flag byte {b}"))),
        }
    }

    /// Element count, rejected early if the remaining bytes cannot hold it.
    fn count(&mut self, elem: usize) -> Result<usize, TransportError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(TransportError::TruncatedFrame);
        }
        Ok(n)
    }

    fn tokens(&mut self) -> Result<Vec<TokenId>, TransportError> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32().map(TokenId)).collect()
    }

    fn mode(&mut self) -> Result<SamplingMode, TransportError> {
        let tag = self.u8()?;
        let k = self.u32()?;
        let p = self.f64()?;
        let canonical_p = p.to_bits() == 0;
        match tag {
            0 if k == 0 && canonical_p => Ok(SamplingMode::Top1),
            1 if canonical_p => Ok(SamplingMode::TopK { k: k as usize }),
            2 if k == 0 => Ok(SamplingMode::TopP { p }),
            0..=2 => Err(malformed("non-canonical sampling mode".into())),
            t => Err(malformed(format!("sampling mode tag {t}"))),
        }
    }
}

fn malformed(msg: String) -> TransportError {
    TransportError::Malformed(msg)
}

/// Decodes one frame from the front of `buf`, returning it and the number
/// of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(WireMessage, usize), TransportError> {
    if buf.len() < 4 {
        return Err(TransportError::TruncatedFrame);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    let total = 4 + len;
    if buf.len() < total {
        return Err(TransportError::TruncatedFrame);
    }
    let msg = decode_body(&buf[4..total])?;
    Ok((msg, total))
}

/// Decodes a buffer holding exactly one frame.
pub fn decode(buf: &[u8]) -> Result<WireMessage, TransportError> {
    let (msg, used) = decode_frame(buf)?;
    if used != buf.len() {
        return Err(malformed(format!("{} bytes after frame", buf.len() - used)));
    }
    Ok(msg)
}

fn decode_body(frame: &[u8]) -> Result<WireMessage, TransportError> {
    let mut c = Cursor { buf: frame, pos: 0 };
    let version = c.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(TransportError::UnknownVersion(version));
    }
    let ty = c.u8()?;
    if !(1..=6).contains(&ty) {
        return Err(TransportError::UnknownType(ty));
    }
    let session = SessionId(c.u64()?);
    let seq = c.u64()?;
    let payload = match ty {
        1 => Payload::Hello(Hello {
            vocab: c.u32()?,
            gamma: c.u32()?,
            mode: c.mode()?,
            compressed: c.flag()?,
        }),
        2 => Payload::PrefillReq { tokens: c.tokens()? },
        3 => Payload::VerifyReq(decode_verify(&mut c, session)?),
        4 => {
            let accepted = c.u32()?;
            let flags = c.u8()?;
            let token = TokenId(c.u32()?);
            let correction = match flags {
                0 if token.0 == 0 => None,
                1 => Some(Correction { token, bonus: false }),
                3 => Some(Correction { token, bonus: true }),
                f => return Err(malformed(format!("verdict flags {f:#04x}"))),
            };
            Payload::VerifyResp(VerifyResp { accepted, correction })
        }
        5 => Payload::ResyncResp { cached_len: c.u64()? },
        _ => Payload::Bye,
    };
    if c.pos != frame.len() {
        return Err(malformed(format!("{} trailing body bytes", frame.len() - c.pos)));
    }
    Ok(WireMessage { session, seq, payload })
}

fn decode_verify(c: &mut Cursor<'_>, session: SessionId) -> Result<VerificationRequest, TransportError> {
    let cached_len = c.u64()? as usize;
    let uncached_accepted = c.tokens()?;
    let start_pos = c.u64()? as usize;
    let want_bonus = c.flag()?;
    let chunk_confidence = c.f64()?;
    let chunk_importance = c.f64()?;
    let mode = match c.u8()? {
        0 => None,
        1 => Some(c.mode()?),
        e => return Err(malformed(format!("distribution encoding {e}"))),
    };
    let n = c.count(4 + 16 + 4)?;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        let token = TokenId(c.u32()?);
        let confidence = c.f64()?;
        let importance = c.f64()?;
        let dist = match mode {
            None => {
                let v = c.count(8)?;
                let probs = (0..v).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
                DraftDist::Full(TokenDistribution::new(probs).map_err(|e| malformed(e.to_string()))?)
            }
            Some(mode) => {
                let e = c.count(12)?;
                let mut entries = Vec::with_capacity(e);
                for _ in 0..e {
                    let t = TokenId(c.u32()?);
                    let p = c.f64()?;
                    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                        return Err(malformed(format!("entry probability {p}")));
                    }
                    entries.push((t, p));
                }
                DraftDist::Compressed(CompressedDistribution::from_entries(mode, entries))
            }
        };
        tokens.push(DraftToken {
            token,
            confidence,
            importance,
            dist,
        });
    }
    let pending = DraftChunk {
        session,
        start_pos,
        tokens,
        chunk_confidence,
        chunk_importance,
    };
    pending.check_aggregates().map_err(|e| malformed(e.to_string()))?;
    Ok(VerificationRequest {
        session,
        cached_len,
        uncached_accepted,
        pending,
        want_bonus,
    })
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), TransportError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>, TransportError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(malformed(format!("frame of {n} bytes")));
    }
    let mut frame = vec![0u8; n];
    r.read_exact(&mut frame).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::TruncatedFrame,
        _ => e.into(),
    })?;
    decode_body(&frame).map(Some)
}

/// Enforces strictly increasing seq numbers per session.
#[derive(Debug, Default, Clone)]
pub struct SeqTracker {
    last: HashMap<SessionId, u64>,
}

impl SeqTracker {
    pub fn check(&mut self, msg: &WireMessage) -> Result<(), TransportError> {
        if let Some(&last) = self.last.get(&msg.session) {
            if msg.seq <= last {
                return Err(TransportError::SeqRegression {
                    session: msg.session,
                    last,
                    got: msg.seq,
                });
            }
        }
        self.last.insert(msg.session, msg.seq);
        Ok(())
    }
}

/// Hands out seq numbers per session for one direction.
#[derive(Debug, Default, Clone)]
pub struct SeqCounter {
    next: HashMap<SessionId, u64>,
}

impl SeqCounter {
    pub fn next(&mut self, session: SessionId) -> u64 {
        let n = self.next.entry(session).or_insert(0);
        *n += 1;
        *n
    }

    pub fn wrap(&mut self, session: SessionId, payload: Payload) -> WireMessage {
        WireMessage {
            session,
            seq: self.next(session),
            payload,
        }
    }
}

/// Link parameters for one direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelModel {
    /// Bits per second; `f64::INFINITY` means transmission is instant.
    pub bandwidth_bps: f64,
    pub propagation_delay_ms: f64,
    /// Probability a frame is dropped. Off by default.
    pub loss: f64,
    /// Extra uniform delay in `[0, jitter)`; frames may then overtake.
    pub reorder_jitter_ms: f64,
    /// Extra uniform delay in `[0, jitter)` that keeps frames in order.
    pub delay_jitter_ms: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            bandwidth_bps: 1e6,
            propagation_delay_ms: 20.0,
            loss: 0.0,
            reorder_jitter_ms: 0.0,
            delay_jitter_ms: 0.0,
        }
    }
}

impl ChannelModel {
    pub fn new(bandwidth_bps: f64, propagation_delay_ms: f64) -> Self {
        Self {
            bandwidth_bps,
            propagation_delay_ms,
            ..Default::default()
        }
    }

    pub fn instant() -> Self {
        Self::new(f64::INFINITY, 0.0)
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.bandwidth_bps > 0.0) {
            return Err(TransportError::InvalidChannel(format!(
                "bandwidth {} bps",
                self.bandwidth_bps
            )));
        }
        if !(self.propagation_delay_ms >= 0.0 && self.propagation_delay_ms.is_finite()) {
            return Err(TransportError::InvalidChannel(format!(
                "delay {} ms",
                self.propagation_delay_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.loss) || !(self.reorder_jitter_ms >= 0.0) || !(self.delay_jitter_ms >= 0.0) {
            return Err(TransportError::InvalidChannel("loss/jitter out of range".into()));
        }
        Ok(())
    }

    /// Serialization time of `bytes` in seconds.
    pub fn transmission_time(&self, bytes: usize) -> f64 {
        if self.bandwidth_bps.is_infinite() {
            0.0
        } else {
            bytes as f64 * 8.0 / self.bandwidth_bps
        }
    }
}

/// One direction of a simulated link. Frames serialize one after another
/// and queue behind bytes still being transmitted.
#[derive(Debug, Clone)]
pub struct SimChannel {
    model: ChannelModel,
    busy_until: f64,
    /// Latest in-order delivery so far.
    last_delivery: f64,
    closed: bool,
    rng: ChaCha8Rng,
}

impl SimChannel {
    pub fn new(model: ChannelModel, seed: u64) -> Result<Self, TransportError> {
        model.validate()?;
        Ok(Self {
            model,
            busy_until: f64::NEG_INFINITY,
            last_delivery: f64::NEG_INFINITY,
            closed: false,
            rng: stream_rng(seed, 0x4348),
        })
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Delivery time of a frame of `bytes` sent at `now`, or `None` if the
    /// loss knob dropped it.
    pub fn transmit(&mut self, bytes: usize, now: f64) -> Result<Option<f64>, TransportError> {
        if self.closed {
            return Err(TransportError::ChannelClosed);
        }
        let start = now.max(self.busy_until);
        let done = start + self.model.transmission_time(bytes);
        self.busy_until = done;
        if self.rng.coin(self.model.loss) {
            return Ok(None);
        }
        let mut delivery = done + self.model.propagation_delay_ms / 1e3;
        if self.model.delay_jitter_ms > 0.0 {
            delivery += self.rng.random::<f64>() * self.model.delay_jitter_ms / 1e3;
            delivery = delivery.max(self.last_delivery);
            self.last_delivery = delivery;
        }
        if self.model.reorder_jitter_ms > 0.0 {
            delivery += self.rng.random::<f64>() * self.model.reorder_jitter_ms / 1e3;
        }
        Ok(Some(delivery))
    }
}

/// Delivery time of one frame on an idle channel.
pub fn simulated_send(msg: &WireMessage, channel: &mut SimChannel, now: f64) -> Result<Option<f64>, TransportError> {
    let bytes = encode(msg)?.len();
    channel.transmit(bytes, now)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub session: SessionId,
    pub payload: Payload,
    /// Time the message reached the receiver.
    pub arrival: f64,
}

/// Device-side link to a cloud runtime.
pub trait Carrier {
    fn send(&mut self, session: SessionId, payload: Payload, now: f64) -> Result<(), TransportError>;
    /// Blocks until the next message for this device.
    fn recv(&mut self, now: f64) -> Result<Received, TransportError>;
}

/// Single-session carrier over simulated links to an in-process cloud.
/// Every message goes through the codec.
pub struct SimCarrier<R = ChaCha8Rng> {
    cloud: CloudRuntime<R>,
    uplink: SimChannel,
    downlink: SimChannel,
    up_seq: SeqCounter,
    down_seq: SeqCounter,
    inbox: VecDeque<(f64, WireMessage)>,
    replies: VecDeque<Received>,
    cloud_free_at: f64,
    kill_at: Option<f64>,
    bytes_up: usize,
    bytes_down: usize,
}

impl<R: ChoiceSource> SimCarrier<R> {
    pub fn new(cloud: CloudRuntime<R>, channel: ChannelModel, seed: u64) -> Result<Self, TransportError> {
        Ok(Self {
            cloud,
            uplink: SimChannel::new(channel, seed)?,
            downlink: SimChannel::new(channel, seed ^ 1)?,
            up_seq: SeqCounter::default(),
            down_seq: SeqCounter::default(),
            inbox: VecDeque::new(),
            replies: VecDeque::new(),
            cloud_free_at: f64::NEG_INFINITY,
            kill_at: None,
            bytes_up: 0,
            bytes_down: 0,
        })
    }

    /// Severs the link at simulated time `t`: later sends fail and replies
    /// arriving after `t` are lost.
    pub fn kill_at(mut self, t: f64) -> Self {
        self.kill_at = Some(t);
        self
    }

    pub fn cloud(&self) -> &CloudRuntime<R> {
        &self.cloud
    }

    pub fn bytes_sent(&self) -> usize {
        self.bytes_up
    }

    pub fn bytes_received(&self) -> usize {
        self.bytes_down
    }

    fn killed(&self, t: f64) -> bool {
        self.kill_at.is_some_and(|k| t >= k)
    }

    fn pump(&mut self) -> Result<(), TransportError> {
        let mut pending: Vec<(f64, WireMessage)> = self.inbox.drain(..).collect();
        pending.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (delivered, msg) in pending {
            let mut t = delivered.max(self.cloud_free_at);
            self.cloud
                .ingest(msg.session, msg.payload, t)
                .map_err(|e| TransportError::Peer(e.to_string()))?;
            while let Some(report) = self.cloud.step(t) {
                t = report.finished;
                self.cloud_free_at = t;
                for (session, payload) in report.responses {
                    let wire = self.down_seq.wrap(session, payload);
                    let bytes = encode(&wire)?;
                    self.bytes_down += bytes.len();
                    let back = decode(&bytes)?;
                    if let Some(arrival) = self.downlink.transmit(bytes.len(), t)? {
                        self.replies.push_back(Received {
                            session: back.session,
                            payload: back.payload,
                            arrival,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl<R: ChoiceSource> Carrier for SimCarrier<R> {
    fn send(&mut self, session: SessionId, payload: Payload, now: f64) -> Result<(), TransportError> {
        if self.killed(now) {
            self.uplink.close();
            return Err(TransportError::ChannelClosed);
        }
        let wire = self.up_seq.wrap(session, payload);
        let bytes = encode(&wire)?;
        self.bytes_up += bytes.len();
        let decoded = decode(&bytes)?;
        if let Some(at) = self.uplink.transmit(bytes.len(), now)? {
            self.inbox.push_back((at, decoded));
        }
        Ok(())
    }

    fn recv(&mut self, _now: f64) -> Result<Received, TransportError> {
        self.pump()?;
        let next = self.replies.pop_front().ok_or(TransportError::NoReply)?;
        if self.killed(next.arrival) {
            self.downlink.close();
            return Err(TransportError::ChannelClosed);
        }
        Ok(next)
    }
}

/// Carrier over a TCP stream. Arrival times are the caller's `now` plus
/// the wall time spent blocked.
pub struct TcpCarrier {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    seq: SeqCounter,
    incoming: SeqTracker,
}

impl TcpCarrier {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            seq: SeqCounter::default(),
            incoming: SeqTracker::default(),
        })
    }

    pub fn shutdown(&self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

impl Carrier for TcpCarrier {
    fn send(&mut self, session: SessionId, payload: Payload, _now: f64) -> Result<(), TransportError> {
        let msg = self.seq.wrap(session, payload);
        write_message(&mut self.writer, &msg)
    }

    fn recv(&mut self, now: f64) -> Result<Received, TransportError> {
        let started = Instant::now();
        let msg = read_message(&mut self.reader)?.ok_or(TransportError::ChannelClosed)?;
        self.incoming.check(&msg)?;
        Ok(Received {
            session: msg.session,
            payload: msg.payload,
            arrival: now + started.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specdec::compress;
    use proptest::prelude::*;

    fn verify_msg(dists: Vec<DraftDist>) -> WireMessage {
        let tokens = dists
            .into_iter()
            .enumerate()
            .map(|(i, dist)| DraftToken {
                token: TokenId(i as u32),
                confidence: 0.25 * i as f64,
                importance: 0.1,
                dist,
            })
            .collect();
        let pending = DraftChunk::new(SessionId(3), 7, tokens);
        WireMessage {
            session: SessionId(3),
            seq: 9,
            payload: Payload::VerifyReq(VerificationRequest {
                session: SessionId(3),
                cached_len: 5,
                uncached_accepted: vec![TokenId(1), TokenId(2)],
                pending,
                want_bonus: true,
            }),
        }
    }

    #[test]
    fn compressed_payload_ratio_at_32k() {
        let mut w = vec![1.0; 32_000];
        w[17] = 1e4;
        let d = TokenDistribution::from_weights(w).unwrap();
        let c = compress(&d, SamplingMode::Top1).unwrap();
        let comp = verify_msg(vec![DraftDist::Compressed(c); 4]);
        let full = verify_msg(vec![DraftDist::Full(d); 4]);
        let comp_len = encode(&comp).unwrap().len();
        let full_len = encode(&full).unwrap().len();
        // the compressed encoding also carries the 13-byte sampling mode
        assert_eq!(full_len + 13 - comp_len, 4 * (8 * 32_000 - 12));
        let payload = |m: &WireMessage| match &m.payload {
            Payload::VerifyReq(r) => r
                .pending
                .tokens
                .iter()
                .map(|t| dist_payload_len(&t.dist))
                .sum::<usize>(),
            _ => unreachable!(),
        };
        assert_eq!(payload(&comp), 4 * (4 + 12));
        assert_eq!(payload(&full), 4 * (4 + 8 * 32_000));
        let ratio = payload(&comp) as f64 / payload(&full) as f64;
        assert!(ratio < 0.005, "{ratio}");
        assert_eq!(decode(&encode(&comp).unwrap()).unwrap(), comp);
    }

    #[test]
    fn decode_errors() {
        let msg = WireMessage {
            session: SessionId(1),
            seq: 1,
            payload: Payload::Bye,
        };
        let bytes = encode(&msg).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(TransportError::TruncatedFrame)
        ));
        assert!(matches!(decode(&bytes[..2]), Err(TransportError::TruncatedFrame)));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(TransportError::UnknownVersion(2))));
        let mut v = bytes.clone();
        v[5] = 9;
        assert!(matches!(decode(&v), Err(TransportError::UnknownType(9))));
        let mut v = bytes.clone();
        v[3] += 1;
        v.push(0);
        assert!(matches!(decode(&v), Err(TransportError::Malformed(_))));
        let mut long = bytes;
        long[3] = 200;
        assert!(matches!(decode(&long), Err(TransportError::TruncatedFrame)));
    }

    #[test]
    fn seq_must_increase() {
        let mut t = SeqTracker::default();
        let m = |seq| WireMessage {
            session: SessionId(1),
            seq,
            payload: Payload::Bye,
        };
        t.check(&m(1)).unwrap();
        t.check(&m(2)).unwrap();
        assert!(t.check(&m(2)).is_err());
    }

    #[test]
    fn channel_arithmetic() {
        let mut ch = SimChannel::new(ChannelModel::new(1e6, 10.0), 0).unwrap();
        let t = ch.transmit(1000, 0.0).unwrap().unwrap();
        assert!((t - 0.018).abs() < 1e-12);
        let t2 = ch.transmit(1000, 0.0).unwrap().unwrap();
        assert!((t2 - 0.026).abs() < 1e-12);
        let mut inst = SimChannel::new(ChannelModel::instant(), 0).unwrap();
        assert_eq!(inst.transmit(1_000_000, 3.5).unwrap(), Some(3.5));
        assert!(ChannelModel::new(0.0, 1.0).validate().is_err());
        assert!(ChannelModel::new(1.0, -1.0).validate().is_err());
        inst.close();
        assert!(matches!(inst.transmit(1, 0.0), Err(TransportError::ChannelClosed)));
    }

    #[test]
    fn delay_jitter_varies_delay_but_keeps_order() {
        let model = ChannelModel {
            delay_jitter_ms: 50.0,
            ..ChannelModel::new(1e9, 10.0)
        };
        let mut ch = SimChannel::new(model, 3).unwrap();
        let times: Vec<f64> = (0..200)
            .map(|i| ch.transmit(100, i as f64 * 0.005).unwrap().unwrap())
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
        let delays: Vec<f64> = times.iter().enumerate().map(|(i, t)| t - i as f64 * 0.005).collect();
        assert!(delays.iter().all(|&d| d >= 0.010));
        let spread = delays.iter().cloned().fold(0.0, f64::max) - delays.iter().cloned().fold(1.0, f64::min);
        assert!(spread > 0.02, "{spread}");
    }

    fn arb_mode() -> impl Strategy<Value = SamplingMode> {
        prop_oneof![
            Just(SamplingMode::Top1),
            (1usize..6).prop_map(|k| SamplingMode::TopK { k }),
            (0.05f64..1.0).prop_map(|p| SamplingMode::TopP { p }),
        ]
    }

    fn arb_dist(v: usize) -> impl Strategy<Value = TokenDistribution> {
        proptest::collection::vec(0.01f64..1.0, v).prop_map(|w| TokenDistribution::from_weights(w).unwrap())
    }

    fn arb_payload() -> impl Strategy<Value = Payload> {
        let hello = (1u32..50_000, 1u32..16, arb_mode(), any::<bool>()).prop_map(|(vocab, gamma, mode, compressed)| {
            Payload::Hello(Hello {
                vocab,
                gamma,
                mode,
                compressed,
            })
        });
        let prefill = proptest::collection::vec(any::<u32>(), 0..20).prop_map(|t| Payload::PrefillReq {
            tokens: t.into_iter().map(TokenId).collect(),
        });
        let verify = (
            0usize..100,
            proptest::collection::vec(0u32..8, 0..5),
            proptest::collection::vec((0u32..8, 0.0f64..1.0, 0.0f64..3.0, arb_dist(8)), 0..5),
            proptest::option::of(arb_mode()),
            any::<bool>(),
        )
            .prop_map(|(cached, unc, toks, mode, want_bonus)| {
                let tokens = toks
                    .into_iter()
                    .map(|(t, c, i, d)| DraftToken {
                        token: TokenId(t),
                        confidence: c,
                        importance: i,
                        dist: match mode {
                            Some(m) => DraftDist::Compressed(compress(&d, m).unwrap()),
                            None => DraftDist::Full(d),
                        },
                    })
                    .collect();
                let start = cached + unc.len();
                Payload::VerifyReq(VerificationRequest {
                    session: SessionId(42),
                    cached_len: cached,
                    uncached_accepted: unc.into_iter().map(TokenId).collect(),
                    pending: DraftChunk::new(SessionId(42), start, tokens),
                    want_bonus,
                })
            });
        let resp = (any::<u32>(), proptest::option::of((any::<u32>(), any::<bool>()))).prop_map(|(a, c)| {
            Payload::VerifyResp(VerifyResp {
                accepted: a,
                correction: c.map(|(t, bonus)| Correction {
                    token: TokenId(t),
                    bonus,
                }),
            })
        });
        prop_oneof![
            hello,
            prefill,
            verify,
            resp,
            any::<u64>().prop_map(|cached_len| Payload::ResyncResp { cached_len }),
            Just(Payload::Bye),
        ]
    }

    proptest! {
        #[test]
        fn codec_round_trip(payload in arb_payload(), seq in any::<u64>()) {
            let msg = WireMessage { session: SessionId(42), seq, payload };
            let bytes = encode(&msg).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &msg);
            prop_assert_eq!(encode(&back).unwrap(), bytes.clone());
            let mut r = &bytes[..];
            prop_assert_eq!(read_message(&mut r).unwrap(), Some(msg));
        }

        #[test]
        fn decodable_frames_reencode_identically(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
            if let Ok(msg) = decode(&bytes) {
                prop_assert_eq!(encode(&msg).unwrap(), bytes);
            }
        }

        #[test]
        fn channel_is_fifo_and_respects_delay(
            sizes in proptest::collection::vec((1usize..5000, 0.0f64..0.01), 1..20),
            bw in 1e4f64..1e8,
            delay in 0.0f64..50.0,
        ) {
            let mut ch = SimChannel::new(ChannelModel::new(bw, delay), 1).unwrap();
            let mut now = 0.0;
            let mut last = f64::NEG_INFINITY;
            for (bytes, gap) in sizes {
                now += gap;
                let t = ch.transmit(bytes, now).unwrap().unwrap();
                prop_assert!(t >= now + delay / 1e3 - 1e-12);
                prop_assert!(t >= last);
                last = t;
            }
        }
    }
}
