//! Feeds a cloud runtime a burst of sessions and prints each scheduler
//! iteration. Prefill always runs before verification and never shares an
//! iteration with it.

use std::sync::Arc;

use tandem::choice::stream_rng;
use tandem::cloud::{chunk_sizes, CloudConfig, CloudRuntime, ComputeCostModel};
use tandem::models::TableLm;
use tandem::transport::{Hello, Payload};
use tandem::types::{
    DraftChunk, DraftDist, DraftToken, SamplingMode, SessionId, TokenDistribution, TokenId, VerificationRequest,
};

fn verify(session: SessionId, prompt_len: usize) -> Payload {
    let tokens = (0..4)
        .map(|i| DraftToken {
            token: TokenId(i),
            confidence: 0.5,
            importance: 1.0,
            dist: DraftDist::Full(TokenDistribution::uniform(16)),
        })
        .collect();
    Payload::VerifyReq(VerificationRequest {
        session,
        cached_len: prompt_len,
        uncached_accepted: Vec::new(),
        pending: DraftChunk::new(session, prompt_len, tokens),
        want_bonus: true,
    })
}

fn main() {
    println!("a 75-token prompt runs as chunks {:?}", chunk_sizes(75, 32));
    let target = Arc::new(TableLm::random_softmax(16, 2.0, 1));
    let config = CloudConfig {
        cost: ComputeCostModel {
            per_token_forward_cost: 0.002,
            fixed_iteration_overhead: 0.05,
        },
        ..Default::default()
    };
    let mut cloud = CloudRuntime::new(target, config, stream_rng(1, 0)).unwrap();
    let hello = Payload::Hello(Hello {
        vocab: 16,
        gamma: 4,
        mode: SamplingMode::TopK { k: 4 },
        compressed: false,
    });

    let prompt_lens = [40, 10, 75];
    for (i, &len) in prompt_lens.iter().enumerate() {
        let s = SessionId(i as u64);
        cloud.ingest(s, hello.clone(), 0.0).unwrap();
        cloud
            .ingest(
                s,
                Payload::PrefillReq {
                    tokens: vec![TokenId(2); len],
                },
                0.0,
            )
            .unwrap();
    }
    // session 0 verifies right away; its request waits behind its own prefill
    cloud.ingest(SessionId(0), verify(SessionId(0), 40), 0.0).unwrap();

    let mut now = 0.0;
    let mut late_verifies_sent = false;
    while let Some(report) = cloud.step(now) {
        println!(
            "{:>6.3}-{:>6.3}s {:?}: {} members, {} tokens, chunks {:?}",
            report.started, report.finished, report.kind, report.members, report.tokens, report.chunks
        );
        now = report.finished;
        if !late_verifies_sent {
            for (i, &len) in prompt_lens.iter().enumerate().skip(1) {
                cloud
                    .ingest(SessionId(i as u64), verify(SessionId(i as u64), len), now)
                    .unwrap();
            }
            late_verifies_sent = true;
        }
    }
    let status = cloud.status();
    println!(
        "served {} verifications, {} prefills; mean latency {:.3}s",
        status.requests_served, status.prefills_served, status.mean_latency
    );
}
