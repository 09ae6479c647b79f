//! Encodes a verification request with full and with compressed draft
//! distributions and decodes it back.

use rand::RngExt;
use tandem::choice::stream_rng;
use tandem::specdec::{compress, sample};
use tandem::transport::{decode, dist_payload_len, encode, Payload, WireMessage};
use tandem::types::{
    DraftChunk, DraftDist, DraftToken, SamplingMode, SessionId, TokenDistribution, VerificationRequest,
};

const VOCAB: usize = 32_000;

/// Long-tailed weights: a handful of likely tokens over a flat floor.
fn peaky(seed: u64) -> TokenDistribution {
    let mut rng = stream_rng(seed, 1);
    let mut w: Vec<f64> = (0..VOCAB).map(|_| rng.random::<f64>() * 1e-5).collect();
    for rank in 0..12 {
        w[rng.random_range(0..VOCAB)] += 8.0 / (rank + 1) as f64;
    }
    TokenDistribution::from_weights(w).unwrap()
}

fn request(compressed: bool, mode: SamplingMode) -> WireMessage {
    let mut rng = stream_rng(2, 0);
    let mut tokens = Vec::new();
    for i in 0..4 {
        let d = peaky(i);
        let t = sample(&d, mode, &mut rng);
        let dist = if compressed {
            DraftDist::Compressed(compress(&d, mode).unwrap())
        } else {
            DraftDist::Full(d.clone())
        };
        tokens.push(DraftToken {
            token: t,
            confidence: d.confidence(),
            importance: 0.5,
            dist,
        });
    }
    let session = SessionId(42);
    WireMessage {
        session,
        seq: 1,
        payload: Payload::VerifyReq(VerificationRequest {
            session,
            cached_len: 1,
            uncached_accepted: Vec::new(),
            pending: DraftChunk::new(session, 1, tokens),
            want_bonus: true,
        }),
    }
}

fn main() {
    for mode in [
        SamplingMode::Top1,
        SamplingMode::TopK { k: 8 },
        SamplingMode::TopP { p: 0.9 },
    ] {
        let full = request(false, mode);
        let small = request(true, mode);
        let dists = |m: &WireMessage| match &m.payload {
            Payload::VerifyReq(r) => r
                .pending
                .tokens
                .iter()
                .map(|t| dist_payload_len(&t.dist))
                .sum::<usize>(),
            _ => 0,
        };
        let bytes = encode(&small).unwrap();
        assert_eq!(decode(&bytes).unwrap(), small);
        println!(
            "{mode:?}: frame {} -> {} bytes, distributions {} -> {} bytes ({:.4}% saved)",
            encode(&full).unwrap().len(),
            bytes.len(),
            dists(&full),
            dists(&small),
            100.0 * (1.0 - dists(&small) as f64 / dists(&full) as f64)
        );
    }
    let mut bytes = encode(&request(true, SamplingMode::Top1)).unwrap();
    bytes[4] ^= 0xff;
    println!("corrupted frame: {}", decode(&bytes).unwrap_err());
}
