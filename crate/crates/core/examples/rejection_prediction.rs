//! Predicts where the cloud will reject a chunk and drafts a branch from
//! that point while the chunk is away.

use std::sync::Arc;

use tandem::choice::{stream_rng, ChoiceSource};
use tandem::device::{parallel_continue, predict_rejection, rejection_distribution, Drafter};
use tandem::models::{LanguageModel, TableLm};
use tandem::policy::OffloadPolicyState;
use tandem::specdec::sample;
use tandem::types::{DraftChunk, DraftDist, DraftToken, SamplingMode, SessionId, TokenId};

fn main() {
    let alpha = 0.5;
    println!(
        "uniform confidence: {:?}",
        rejection_distribution(&[0.0; 4], alpha).unwrap()
    );
    println!(
        "confident tail:     {:?}",
        rejection_distribution(&[0.2, 0.3, 0.9, 0.95], alpha).unwrap()
    );

    // rejection positions from a capped geometric acceptance process
    let mut rng = stream_rng(4, 0);
    let gamma = 4;
    let chunk = DraftChunk::new(
        SessionId(0),
        0,
        (0..gamma)
            .map(|i| DraftToken {
                token: TokenId(i as u32),
                confidence: 0.0,
                importance: 0.0,
                dist: DraftDist::Full(tandem::types::TokenDistribution::uniform(4)),
            })
            .collect(),
    );
    let (mut hits, mut rejected) = (0, 0);
    for _ in 0..10_000 {
        let actual = (0..gamma).find(|_| !rng.coin(alpha));
        let Some(actual) = actual else { continue };
        rejected += 1;
        if predict_rejection(&chunk, alpha, &mut rng).unwrap().r_star == actual {
            hits += 1;
        }
    }
    println!(
        "hit rate {:.3} over {rejected} rejected chunks (1/gamma = {:.3})",
        hits as f64 / rejected as f64,
        1.0 / gamma as f64
    );

    // a real chunk and its speculative branch
    let model: Arc<dyn LanguageModel> = Arc::new(TableLm::random_softmax(12, 2.0, 9));
    let mode = SamplingMode::TopK { k: 6 };
    let committed = vec![TokenId(1), TokenId(5)];
    let mut prefix = committed.clone();
    let mut tokens = Vec::new();
    let mut dists = Vec::new();
    for _ in 0..gamma {
        let d = model.distribution(&prefix);
        let t = sample(&d, mode, &mut rng);
        tokens.push(DraftToken {
            token: t,
            confidence: d.confidence(),
            importance: 0.0,
            dist: DraftDist::Full(d.clone()),
        });
        dists.push(d);
        prefix.push(t);
    }
    let chunk = DraftChunk::new(SessionId(0), committed.len(), tokens);
    let prediction = predict_rejection(&chunk, alpha, &mut rng).unwrap();
    let drafter = Drafter {
        model,
        policy: OffloadPolicyState::default(),
        early_exit: false,
        token_time: 0.05,
        mode,
    };
    let branch = parallel_continue(
        &committed,
        &chunk.token_ids(),
        &dists,
        &prediction,
        &drafter,
        6,
        None,
        0.0,
        &mut rng,
    )
    .unwrap()
    .expect("alternative exists");
    println!("chunk {:?}", chunk.token_ids().iter().map(|t| t.0).collect::<Vec<_>>());
    println!(
        "predicted rejection at {}, alternative {}, branch {:?} ready at {:?}",
        branch.r_star,
        branch.alternative.0,
        branch.tokens.iter().map(|t| t.0).collect::<Vec<_>>(),
        branch.completions
    );
}
