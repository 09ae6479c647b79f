//! Offload gates over a grid of chunk confidence and importance, plus the
//! early-exit boundary and the sequence-level cut-off.

use tandem::choice::stream_rng;
use tandem::policy::{decide_offload, exit_boundary, p_conf, p_imp, seq_exit, Decision, GateMode, OffloadPolicyState};
use tandem::types::{DraftChunk, DraftDist, DraftToken, SessionConfig, SessionId, TokenDistribution, TokenId};

fn chunk(confidence: f64, importance: f64) -> DraftChunk {
    let tokens = (0..4)
        .map(|i| DraftToken {
            token: TokenId(i),
            confidence,
            importance,
            dist: DraftDist::Full(TokenDistribution::uniform(8)),
        })
        .collect();
    DraftChunk::new(SessionId(0), 0, tokens)
}

fn main() {
    let state = OffloadPolicyState {
        c_th: 0.7,
        i_th: 2.0,
        ..Default::default()
    };
    println!(
        "c_th {} i_th {} k {} theta {}",
        state.c_th, state.i_th, state.k, state.theta
    );

    print!("{:>6}", "c \\ i");
    let imps = [0.2, 0.8, 1.2, 1.6, 2.0, 3.0];
    for i in imps {
        print!("{i:>8.1}");
    }
    println!();
    let mut rng = stream_rng(3, 0);
    for c in [0.3, 0.5, 0.65, 0.7, 0.8, 0.95] {
        print!("{c:>6.2}");
        for i in imps {
            let n = 4000;
            let offloads = (0..n)
                .filter(|_| decide_offload(&chunk(c, i), &state, GateMode::Both, &mut rng) == Decision::Offload)
                .count();
            print!("{:>8.3}", offloads as f64 / n as f64);
        }
        println!("   p_conf {:.3}", p_conf(c, &state));
    }
    println!("p_imp: {}", imps.map(|i| format!("{:.3}", p_imp(i, &state))).join(" "));

    for window in [0.25, 0.5, 0.75] {
        println!(
            "exit window {window}: first exit layer of 8 is {}",
            exit_boundary(8, window)
        );
    }
    let config = SessionConfig {
        max_len: 100,
        ..Default::default()
    };
    let last = (0..=100).take_while(|&s| !seq_exit(s, &config)).last().unwrap();
    println!("offloading stops after step {last} of {}", config.max_len);
}
