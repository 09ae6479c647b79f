//! Drafts chunks with a noisy copy of the target and verifies them with
//! speculative sampling. The first token after each verified chunk is
//! compared against direct sampling from the target.

use tandem::choice::stream_rng;
use tandem::models::{LanguageModel, TableLm};
use tandem::specdec::{effective, sample, verify_chunk};
use tandem::types::{SamplingMode, SessionId, TokenId};

fn main() {
    let target = TableLm::random_softmax(16, 3.0, 1);
    let draft = target.logit_noise(1.0, 2);
    let mode = SamplingMode::TopK { k: 4 };
    let gamma = 4;
    let prompt = vec![TokenId(3)];
    let mut rng = stream_rng(7, 0);

    let trials = 20_000;
    let mut accepted = vec![0usize; gamma + 1];
    let mut first = [0usize; 16];
    for _ in 0..trials {
        let mut prefix = prompt.clone();
        let mut tokens = Vec::new();
        let mut q = Vec::new();
        let mut p = Vec::new();
        for _ in 0..gamma {
            let d = effective(&draft.distribution(&prefix), mode);
            let t = sample(&d, mode, &mut rng);
            p.push(effective(&target.distribution(&prefix), mode));
            q.push(d);
            tokens.push(t);
            prefix.push(t);
        }
        // one extra target distribution buys a bonus token on full acceptance
        p.push(effective(&target.distribution(&prefix), mode));
        let verdict = verify_chunk(SessionId(0), &tokens, &q, &p, &mut rng).unwrap();
        accepted[verdict.accepted_count] += 1;
        let out = if verdict.accepted_count > 0 {
            tokens[0]
        } else {
            verdict.correction.unwrap().token
        };
        first[out.index()] += 1;
    }

    println!("accepted per chunk of {gamma}:");
    for (n, c) in accepted.iter().enumerate() {
        println!("  {n}: {:.3}", *c as f64 / trials as f64);
    }
    let direct = effective(&target.distribution(&prompt), mode);
    let tv: f64 = (0..16)
        .map(|i| (first[i] as f64 / trials as f64 - direct.probs()[i]).abs())
        .sum::<f64>()
        / 2.0;
    println!("first token vs direct target sampling: TV {tv:.4}");
}
