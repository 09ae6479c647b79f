#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use tandem::choice::ChoiceSource;
use tandem::clock::SimClock;
use tandem::cloud::{CloudConfig, CloudRuntime, ComputeCostModel};
use tandem::device::{run_session, DeviceOptions, DeviceSession, OffloadMode};
use tandem::models::{ImportanceProvider, LanguageModel, ModelError};
use tandem::policy::OffloadPolicyState;
use tandem::transport::{ChannelModel, SimCarrier};
use tandem::types::{SamplingMode, SessionConfig, SessionId, TokenId};

/// Walks the choice tree depth first. Each run replays the current path and
/// extends it with the first outcome at new choice points.
#[derive(Debug, Default)]
pub struct Enumerator {
    path: Vec<(usize, Vec<f64>)>,
    depth: usize,
}

impl Enumerator {
    fn choose(&mut self, probs: Vec<f64>) -> usize {
        let c = if self.depth < self.path.len() {
            self.path[self.depth].0
        } else {
            let first = probs.iter().position(|&p| p > 0.0).expect("positive outcome");
            self.path.push((first, probs));
            first
        };
        self.depth += 1;
        c
    }

    pub fn probability(&self) -> f64 {
        self.path.iter().map(|(c, p)| p[*c]).product()
    }

    /// Moves to the next leaf; false when the tree is exhausted.
    pub fn advance(&mut self) -> bool {
        assert_eq!(self.depth, self.path.len(), "run did not replay the whole path");
        self.depth = 0;
        while let Some((c, probs)) = self.path.pop() {
            if let Some(next) = (c + 1..probs.len()).find(|&i| probs[i] > 0.0) {
                self.path.push((next, probs));
                return true;
            }
        }
        false
    }
}

#[derive(Clone, Default)]
pub struct Shared(pub Rc<RefCell<Enumerator>>);

impl ChoiceSource for Shared {
    fn coin(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            return true;
        }
        if p <= 0.0 || p.is_nan() {
            return false;
        }
        self.0.borrow_mut().choose(vec![p, 1.0 - p]) == 0
    }

    fn pick(&mut self, weights: &[f64]) -> usize {
        let positive: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        assert!(!positive.is_empty());
        if positive.len() == 1 {
            return positive[0];
        }
        let total: f64 = positive.iter().map(|&i| weights[i]).sum();
        let probs = weights.iter().map(|&w| if w > 0.0 { w / total } else { 0.0 }).collect();
        self.0.borrow_mut().choose(probs)
    }
}

pub struct Flat;

impl ImportanceProvider for Flat {
    fn importance(&self, _seq: &[TokenId], _position: usize) -> Result<f64, ModelError> {
        Ok(1.0)
    }
}

pub fn flat_importance() -> Arc<dyn ImportanceProvider> {
    Arc::new(Flat)
}

/// Device options for lossless runs: every chunk offloaded with full
/// distributions, no speculation branch, no early exit.
pub fn forced_options() -> DeviceOptions {
    DeviceOptions {
        pi: false,
        early_exit: false,
        compression: false,
        offload: OffloadMode::Always,
        ..Default::default()
    }
}

/// Runs one session end to end over the simulated carrier with `device_rng`
/// driving the device and `cloud_rng` the cloud.
pub fn generate<R: ChoiceSource>(
    draft: Arc<dyn LanguageModel>,
    target: Arc<dyn LanguageModel>,
    prompt: &[TokenId],
    config: &SessionConfig,
    options: &DeviceOptions,
    device_rng: R,
    cloud_rng: R,
) -> Vec<TokenId> {
    let cloud = CloudRuntime::new(
        target,
        CloudConfig {
            cost: ComputeCostModel::zero(),
            ..Default::default()
        },
        cloud_rng,
    )
    .unwrap();
    let mut carrier = SimCarrier::new(cloud, ChannelModel::instant(), config.seed).unwrap();
    let mut device = DeviceSession::new(
        SessionId(1),
        prompt.to_vec(),
        config.clone(),
        OffloadPolicyState::default(),
        options.clone(),
        draft,
        flat_importance(),
        device_rng,
    )
    .unwrap();
    run_session(&mut device, &mut carrier, &mut SimClock::default()).unwrap();
    device.generated_tokens().to_vec()
}

/// Exact output distribution of the full pipeline.
pub fn enumerate_pipeline(
    draft: Arc<dyn LanguageModel>,
    target: Arc<dyn LanguageModel>,
    prompt: &[TokenId],
    config: &SessionConfig,
) -> HashMap<Vec<TokenId>, f64> {
    enumerate_with(draft, target, prompt, config, &forced_options())
}

pub fn enumerate_with(
    draft: Arc<dyn LanguageModel>,
    target: Arc<dyn LanguageModel>,
    prompt: &[TokenId],
    config: &SessionConfig,
    options: &DeviceOptions,
) -> HashMap<Vec<TokenId>, f64> {
    let shared = Shared::default();
    let mut out: HashMap<Vec<TokenId>, f64> = HashMap::new();
    loop {
        let seq = generate(
            draft.clone(),
            target.clone(),
            prompt,
            config,
            options,
            shared.clone(),
            shared.clone(),
        );
        *out.entry(seq).or_default() += shared.0.borrow().probability();
        if !shared.0.borrow_mut().advance() {
            return out;
        }
    }
}

/// Probability of `seq` under direct sampling from `target` with `mode`.
pub fn direct_probability(target: &dyn LanguageModel, prompt: &[TokenId], seq: &[TokenId], mode: SamplingMode) -> f64 {
    let mut prefix = prompt.to_vec();
    let mut p = 1.0;
    for &t in seq {
        p *= tandem::specdec::effective(&target.distribution(&prefix), mode).prob(t);
        prefix.push(t);
    }
    p
}

/// Exact per-position marginals of a first-order model, by propagating the
/// state distribution.
pub fn bigram_marginals(model: &dyn LanguageModel, last: TokenId, len: usize) -> Vec<Vec<f64>> {
    let v = model.vocab_size();
    let rows: Vec<Vec<f64>> = (0..v as u32)
        .map(|x| model.distribution(&[TokenId(x)]).probs().to_vec())
        .collect();
    let mut cur = vec![0.0; v];
    cur[last.index()] = 1.0;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let mut next = vec![0.0; v];
        for (x, &px) in cur.iter().enumerate() {
            for (y, &q) in rows[x].iter().enumerate() {
                next[y] += px * q;
            }
        }
        out.push(next.clone());
        cur = next;
    }
    out
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
