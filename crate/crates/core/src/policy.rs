//! Selective token-level offloading and progressive early exit.
//!
//! Chunk confidence is a coarse filter that keeps confident chunks local;
//! chunk importance then decides, within a budget, which of the remaining
//! chunks are worth a round trip to the cloud.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::ChoiceSource;
use crate::models::LayerSignal;
use crate::types::{DraftChunk, SessionConfig, TokenDistribution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("c_th = {0} outside [0, 1]")]
    ConfidenceThreshold(f64),
    #[error("i_th = {0} must be > 0")]
    ImportanceThreshold(f64),
    #[error("exit_window = {0} outside (0, 1]")]
    ExitWindow(f64),
    #[error("budget = {0} outside [0, 1]")]
    Budget(f64),
    #[error("no layer signals")]
    NoSignals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OffloadPolicyState {
    pub c_th: f64,
    /// Slope of the confidence sigmoid.
    pub k: f64,
    /// Upper importance cut-off; `f64::INFINITY` disables offloading.
    #[serde(with = "infinite_as_null")]
    pub i_th: f64,
    /// Slope of the importance sigmoid, negative.
    pub theta: f64,
    pub budget: f64,
    pub margin_threshold: f64,
    /// Fraction of final layers where early exit is allowed.
    pub exit_window: f64,
    pub seq_exit_fraction: f64,
}

impl Default for OffloadPolicyState {
    fn default() -> Self {
        Self {
            c_th: 0.8,
            k: 10.0,
            i_th: 1.0,
            theta: -10.0,
            budget: 0.2,
            margin_threshold: 0.7,
            exit_window: 0.25,
            seq_exit_fraction: 0.8,
        }
    }
}

impl OffloadPolicyState {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.c_th) {
            return Err(PolicyError::ConfidenceThreshold(self.c_th));
        }
        if !(self.i_th > 0.0) {
            return Err(PolicyError::ImportanceThreshold(self.i_th));
        }
        if !(self.exit_window > 0.0 && self.exit_window <= 1.0) {
            return Err(PolicyError::ExitWindow(self.exit_window));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(PolicyError::Budget(self.budget));
        }
        Ok(())
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + x.exp())
}

/// Dispatch probability from mean chunk confidence.
pub fn p_conf(c: f64, state: &OffloadPolicyState) -> f64 {
    if c <= state.c_th {
        return 1.0;
    }
    let norm = (c - state.c_th) / (1.0 - state.c_th) - 0.5;
    logistic(state.k * norm)
}

/// Offload probability from mean chunk importance.
pub fn p_imp(i: f64, state: &OffloadPolicyState) -> f64 {
    let half = state.i_th / 2.0;
    if i <= half {
        return 0.0;
    }
    if i > state.i_th {
        return 1.0;
    }
    let norm = (i - half) / half - 0.5;
    logistic(state.theta * norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Retain,
    Offload,
}

/// Which gates participate in the decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Both,
    ConfOnly,
    ImpOnly,
}

/// Sequential Bernoulli gates: confidence first, then importance on the
/// survivors. Offloads with probability `p_conf * p_imp`.
pub fn decide_offload<R: ChoiceSource + ?Sized>(
    chunk: &DraftChunk,
    state: &OffloadPolicyState,
    gates: GateMode,
    rng: &mut R,
) -> Decision {
    let conf_gate = || p_conf(chunk.chunk_confidence, state);
    let imp_gate = || p_imp(chunk.chunk_importance, state);
    let pass = match gates {
        GateMode::Both => rng.coin(conf_gate()) && rng.coin(imp_gate()),
        GateMode::ConfOnly => rng.coin(conf_gate()),
        GateMode::ImpOnly => rng.coin(imp_gate()),
    };
    if pass {
        Decision::Offload
    } else {
        Decision::Retain
    }
}

/// Output of layer-wise early exit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExit {
    /// 0-based index of the exit layer.
    pub layer_index: usize,
    pub dist: TokenDistribution,
    pub confidence: f64,
}

impl LayerExit {
    pub fn layers_run(&self) -> usize {
        self.layer_index + 1
    }
}

/// First 0-based layer index allowed to exit: `ceil((1 - window) * L)`,
/// capped at the final layer.
pub fn exit_boundary(layers: usize, exit_window: f64) -> usize {
    // The epsilon keeps exact products such as 0.75 * 8 from rounding up.
    let raw = ((1.0 - exit_window) * layers as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.min(layers.saturating_sub(1))
}

/// Exits at the first eligible layer whose top1-top2 margin exceeds the
/// threshold, else at the final layer.
pub fn layer_exit(signals: &[LayerSignal], state: &OffloadPolicyState) -> Result<LayerExit, PolicyError> {
    let last = signals.last().ok_or(PolicyError::NoSignals)?;
    let boundary = exit_boundary(signals.len(), state.exit_window);
    let chosen = signals
        .iter()
        .skip(boundary)
        .find(|s| s.margin > state.margin_threshold)
        .unwrap_or(last);
    Ok(LayerExit {
        layer_index: chosen.layer_index,
        dist: chosen.provisional_dist.clone(),
        confidence: chosen.top1,
    })
}

/// True once offloading is disabled for the rest of the sequence.
/// `step` counts generated tokens.
pub fn seq_exit(step: usize, config: &SessionConfig) -> bool {
    step as f64 > config.seq_exit_fraction * config.max_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::stream_rng;
    use crate::types::{DraftDist, DraftToken, SessionId, TokenId};

    fn state(c_th: f64, i_th: f64) -> OffloadPolicyState {
        OffloadPolicyState {
            c_th,
            i_th,
            ..Default::default()
        }
    }

    fn chunk(conf: f64, imp: f64) -> DraftChunk {
        let t = DraftToken {
            token: TokenId(0),
            confidence: conf,
            importance: imp,
            dist: DraftDist::Full(TokenDistribution::uniform(2)),
        };
        DraftChunk::new(SessionId(0), 0, vec![t.clone(), t])
    }

    #[test]
    fn p_conf_branches() {
        let s = state(0.8, 1.0);
        assert_eq!(p_conf(0.8, &s), 1.0);
        assert_eq!(p_conf(0.3, &s), 1.0);
        assert!((p_conf(0.9, &s) - 0.5).abs() < 1e-12);
        let want = 1.0 / (1.0 + 5f64.exp());
        assert!((p_conf(1.0, &s) - want).abs() < 1e-12);
        assert!((p_conf(1.0, &s) - 0.00669).abs() < 1e-5);
        // c_th = 1 keeps everything dispatchable
        assert_eq!(p_conf(1.0, &state(1.0, 1.0)), 1.0);
    }

    #[test]
    fn p_imp_branches() {
        let s = state(0.8, 0.4);
        assert_eq!(p_imp(0.2, &s), 0.0);
        assert_eq!(p_imp(0.41, &s), 1.0);
        assert!((p_imp(0.3, &s) - 0.5).abs() < 1e-12);
        let want = 1.0 / (1.0 + (-4.5f64).exp());
        assert!((p_imp(0.39, &s) - want).abs() < 1e-12);
        assert!((p_imp(0.39, &s) - 0.98901).abs() < 1e-5);
        assert_eq!(p_imp(1e9, &state(0.8, f64::INFINITY)), 0.0);
    }

    #[test]
    fn decide_corner_cases() {
        let s = state(0.8, 0.4);
        let mut rng = stream_rng(0, 0);
        for _ in 0..1000 {
            assert_eq!(
                decide_offload(&chunk(1.0, 0.1), &s, GateMode::Both, &mut rng),
                Decision::Retain
            );
            assert_eq!(
                decide_offload(&chunk(0.5, 0.5), &s, GateMode::Both, &mut rng),
                Decision::Offload
            );
        }
    }

    #[test]
    fn decide_rate_is_gate_product() {
        let s = state(0.8, 0.4);
        let c = chunk(0.88, 0.31);
        let want = p_conf(0.88, &s) * p_imp(0.31, &s);
        let mut rng = stream_rng(1, 0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| decide_offload(&c, &s, GateMode::Both, &mut rng) == Decision::Offload)
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - want).abs() < 0.01, "{rate} vs {want}");
    }

    fn signals(margins: &[f64]) -> Vec<LayerSignal> {
        margins
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let top1 = (1.0 + m) / 2.0;
                LayerSignal::new(i, TokenDistribution::new(vec![top1, 1.0 - top1]).unwrap())
            })
            .collect()
    }

    #[test]
    fn exit_boundary_values() {
        assert_eq!(exit_boundary(4, 0.25), 3);
        assert_eq!(exit_boundary(8, 0.25), 6);
        assert_eq!(exit_boundary(1, 0.25), 0);
        assert_eq!(exit_boundary(10, 1.0), 0);
        assert_eq!(exit_boundary(4, 0.1), 3);
    }

    #[test]
    fn layer_exit_cases() {
        let s = OffloadPolicyState::default();
        // only the final layer of four is eligible
        let e = layer_exit(&signals(&[0.9, 0.9, 0.9, 0.2]), &s).unwrap();
        assert_eq!(e.layer_index, 3);
        let e = layer_exit(&signals(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 0.9]), &s).unwrap();
        assert_eq!(e.layer_index, 6);
        assert!((e.confidence - 0.9).abs() < 1e-12);
        let e = layer_exit(&signals(&[0.9; 8].map(|_| 0.5)), &s).unwrap();
        assert_eq!(e.layer_index, 7);
        assert!(layer_exit(&[], &s).is_err());
    }

    #[test]
    fn seq_exit_boundary() {
        let cfg = SessionConfig {
            max_len: 100,
            seq_exit_fraction: 0.8,
            ..Default::default()
        };
        assert!(!seq_exit(80, &cfg));
        assert!(seq_exit(81, &cfg));
        let full = SessionConfig {
            seq_exit_fraction: 1.0,
            ..cfg
        };
        assert!((0..=100).all(|s| !seq_exit(s, &full)));
    }

    #[test]
    fn infinite_threshold_round_trips_through_json() {
        let s = state(0.8, f64::INFINITY);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"i_th\":null"));
        let back: OffloadPolicyState = serde_json::from_str(&json).unwrap();
        assert_eq!(back.i_th, f64::INFINITY);
    }

    proptest::proptest! {
        #[test]
        fn gates_in_unit_interval(c in 0.0f64..=1.0, i in 0.0f64..10.0, c_th in 0.0f64..=1.0, i_th in 0.01f64..5.0) {
            let s = state(c_th, i_th);
            let a = p_conf(c, &s);
            let b = p_imp(i, &s);
            proptest::prop_assert!((0.0..=1.0).contains(&a));
            proptest::prop_assert!((0.0..=1.0).contains(&b));
        }

        #[test]
        fn gates_monotone(c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0, i1 in 0.0f64..3.0, i2 in 0.0f64..3.0, c_th in 0.0f64..0.99, i_th in 0.01f64..2.0) {
            let s = state(c_th, i_th);
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            if lo > c_th {
                proptest::prop_assert!(p_conf(lo, &s) >= p_conf(hi, &s));
            }
            let (lo, hi) = if i1 <= i2 { (i1, i2) } else { (i2, i1) };
            proptest::prop_assert!(p_imp(lo, &s) <= p_imp(hi, &s));
        }

        #[test]
        fn never_exits_before_boundary(ms in proptest::collection::vec(0.0f64..1.0, 1..24), w in 0.05f64..=1.0) {
            let s = OffloadPolicyState { exit_window: w, ..Default::default() };
            let e = layer_exit(&signals(&ms), &s).unwrap();
            let b = exit_boundary(ms.len(), w);
            proptest::prop_assert!(e.layer_index >= b);
            proptest::prop_assert_eq!(b, (((1.0 - w) * ms.len() as f64) - 1e-9).ceil().max(0.0).min((ms.len() - 1) as f64) as usize);
        }
    }
}
