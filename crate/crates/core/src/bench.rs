//! Scenario runner: builds models, workload and policy from a TOML file,
//! runs the simulation and reduces it to a [`MetricsReport`].
//!
//! Relative paths inside a scenario resolve against the scenario file's
//! directory. See `scenarios/` for annotated examples of every section.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::choice::{mix64, stream_rng};
use crate::cloud::CloudConfig;
use crate::device::{DeviceOptions, OffloadMode, SessionSummary, TokenSource};
use crate::models::{
    EntropyImportance, ImportanceProvider, LanguageModel, LayeredLm, ModelError, NgramLm, NoiseSchedule, TableLm,
    TraceImportance,
};
use crate::policy::{GateMode, OffloadPolicyState};
use crate::profiler::{profile, ProfileError, ProfileResult};
use crate::sim::{simulate, SimError, SimOutput, SimSession, SimSetup};
use crate::transport::ChannelModel;
use crate::types::{SessionConfig, SessionId, TokenId};

const WORKLOAD_STREAM: u64 = 0x770a;
const PROFILE_STREAM: u64 = 0x9f0f;
const IMPORTANCE_STREAM: u64 = 0x1e70;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error(transparent)]
    ModelBuild(#[from] ModelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Text table, one `context... | probabilities` row per line.
    Table {
        path: PathBuf,
    },
    /// Add-one smoothed n-gram over a whitespace-separated token corpus.
    Ngram {
        corpus: PathBuf,
        order: usize,
        vocab: usize,
    },
    RandomBigram {
        vocab: usize,
        sharpness: f64,
        seed: u64,
    },
    /// Rows are softmaxes of Gaussian logits scaled by `scale`.
    RandomSoftmax {
        vocab: usize,
        scale: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DraftSpec {
    SameAsTarget,
    /// Target table blended with a random table; needs a table-backed target.
    Perturbed {
        mix: f64,
        sharpness: f64,
        seed: u64,
    },
    /// Target table with Gaussian noise on the log-probabilities.
    LogitNoise {
        sigma: f64,
        seed: u64,
    },
    Model {
        model: ModelSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerSpec {
    pub layers: usize,
    pub amplitude: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            layers: 8,
            amplitude: s.amplitude,
            decay: s.decay,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSpec {
    pub target: ModelSpec,
    pub draft: DraftSpec,
    #[serde(default)]
    pub draft_layers: LayerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImportanceSpec {
    /// Entropy of the draft's next-token distribution.
    Entropy,
    /// One `position score` trace shared by every session.
    Trace { path: PathBuf },
    /// Fresh long-tailed synthetic trace per session.
    Lomax { shape: f64, seed: u64 },
}

impl Default for ImportanceSpec {
    fn default() -> Self {
        ImportanceSpec::Lomax { shape: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    /// Uniform random prompts of `prompt_len` tokens.
    Synthetic { prompt_len: usize, seed: u64 },
    /// One prompt per line, whitespace-separated token ids; cycled.
    File { path: PathBuf },
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec::Synthetic { prompt_len: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    /// Profile on `prompts` synthetic prompts before running.
    Auto {
        prompts: usize,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub pi_on: bool,
    pub early_exit_on: bool,
    pub compression_on: bool,
    pub conf_only: bool,
    pub imp_only: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            pi_on: true,
            early_exit_on: true,
            compression_on: true,
            conf_only: false,
            imp_only: false,
        }
    }
}

impl Variant {
    pub fn gates(&self) -> Result<GateMode, BenchError> {
        match (self.conf_only, self.imp_only) {
            (false, false) => Ok(GateMode::Both),
            (true, false) => Ok(GateMode::ConfOnly),
            (false, true) => Ok(GateMode::ImpOnly),
            (true, true) => Err(BenchError::Invalid("conf_only and imp_only are exclusive".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSpec {
    pub token_time: f64,
    pub alpha: f64,
    pub offload: OffloadMode,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        let d = DeviceOptions::default();
        Self {
            token_time: d.token_time,
            alpha: d.alpha,
            offload: d.offload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub models: ModelsSpec,
    #[serde(default)]
    pub importance: ImportanceSpec,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub policy: OffloadPolicyState,
    /// Overrides `policy.c_th` and `policy.i_th` from a profile.
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub device: DeviceSpec,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub cloud: CloudConfig,
    #[serde(default = "one")]
    pub sessions: usize,
    /// Poisson session arrivals per second; 0 starts every session at once.
    #[serde(default)]
    pub arrival_rate: f64,
    #[serde(default = "one_f")]
    pub packing_factor: f64,
    #[serde(default)]
    pub kill_at: Option<f64>,
    #[serde(default)]
    pub audit: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl Scenario {
    pub fn parse(text: &str, path: &Path) -> Result<Self, BenchError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| BenchError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        s.validate().map_err(|e| BenchError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn referenced_files(&self) -> Vec<(&'static str, &Path)> {
        let mut refs: Vec<(&'static str, &Path)> = Vec::new();
        if let ImportanceSpec::Trace { path } = &self.importance {
            refs.push(("importance.path", path));
        }
        if let WorkloadSpec::File { path } = &self.workload {
            refs.push(("workload.path", path));
        }
        if let Some(ProfileSpec::File { path }) = &self.profile {
            refs.push(("profile.path", path));
        }
        match &self.models.target {
            ModelSpec::Table { path } => refs.push(("models.target.path", path)),
            ModelSpec::Ngram { corpus, .. } => refs.push(("models.target.corpus", corpus)),
            ModelSpec::RandomBigram { .. } | ModelSpec::RandomSoftmax { .. } => {}
        }
        if let DraftSpec::Model { model } = &self.models.draft {
            match model {
                ModelSpec::Table { path } => refs.push(("models.draft.model.path", path)),
                ModelSpec::Ngram { corpus, .. } => refs.push(("models.draft.model.corpus", corpus)),
                ModelSpec::RandomBigram { .. } | ModelSpec::RandomSoftmax { .. } => {}
            }
        }
        refs
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Invalid(m));
        for (field, p) in self.referenced_files() {
            let full = self.resolve(p);
            if !full.is_file() {
                return bad(format!("{field}: file {} does not exist", full.display()));
            }
        }
        self.session
            .validate()
            .map_err(|e| BenchError::Invalid(format!("session: {e}")))?;
        self.policy
            .validate()
            .map_err(|e| BenchError::Invalid(format!("policy: {e}")))?;
        self.channel
            .validate()
            .map_err(|e| BenchError::Invalid(format!("channel: {e}")))?;
        self.cloud
            .cost
            .validate()
            .map_err(|e| BenchError::Invalid(format!("cloud.cost: {e}")))?;
        self.variant.gates()?;
        if self.sessions == 0 {
            return bad("sessions: must be at least 1".into());
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return bad(format!("arrival_rate: {} is not a finite rate", self.arrival_rate));
        }
        if !(self.packing_factor > 0.0 && self.packing_factor.is_finite()) {
            return bad(format!("packing_factor: {} must be positive", self.packing_factor));
        }
        if self.device.token_time < 0.0 || !self.device.token_time.is_finite() {
            return bad(format!(
                "device.token_time: {} must be non-negative",
                self.device.token_time
            ));
        }
        if self.cloud.chunk_size == 0 {
            return bad("cloud.chunk_size: must be positive".into());
        }
        if let WorkloadSpec::Synthetic { prompt_len: 0, .. } = self.workload {
            return bad("workload.prompt_len: must be positive".into());
        }
        if let Some(ProfileSpec::Auto { prompts: 0 }) = self.profile {
            return bad("profile.prompts: must be positive".into());
        }
        if self.models.draft_layers.layers == 0 {
            return bad("models.draft_layers.layers: must be positive".into());
        }
        Ok(())
    }

    pub fn device_options(&self) -> Result<DeviceOptions, BenchError> {
        Ok(DeviceOptions {
            pi: self.variant.pi_on,
            early_exit: self.variant.early_exit_on,
            compression: self.variant.compression_on,
            gates: self.variant.gates()?,
            offload: self.device.offload,
            alpha: self.device.alpha,
            token_time: self.device.token_time,
        })
    }

    /// Session config with the scenario seed applied.
    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            seed: self.seed,
            ..self.session.clone()
        }
    }
}

fn load_model(s: &Scenario, spec: &ModelSpec) -> Result<Arc<dyn LanguageModel>, BenchError> {
    Ok(match spec {
        ModelSpec::Table { path } => {
            let full = s.resolve(path);
            Arc::new(TableLm::load(&full).map_err(|source| BenchError::Model { path: full, source })?)
        }
        ModelSpec::Ngram { corpus, order, vocab } => {
            let full = s.resolve(corpus);
            let text = fs::read_to_string(&full).map_err(io_err(&full))?;
            let tokens = NgramLm::parse_corpus(&text).map_err(|source| BenchError::Model {
                path: full.clone(),
                source,
            })?;
            Arc::new(NgramLm::new(&tokens, *order, *vocab).map_err(|source| BenchError::Model { path: full, source })?)
        }
        ModelSpec::RandomBigram { vocab, sharpness, seed } => {
            Arc::new(TableLm::random_bigram(*vocab, *sharpness, *seed))
        }
        ModelSpec::RandomSoftmax { vocab, scale, seed } => Arc::new(TableLm::random_softmax(*vocab, *scale, *seed)),
    })
}

fn load_table(s: &Scenario, spec: &ModelSpec) -> Result<Option<TableLm>, BenchError> {
    Ok(match spec {
        ModelSpec::Table { path } => {
            let full = s.resolve(path);
            Some(TableLm::load(&full).map_err(|source| BenchError::Model { path: full, source })?)
        }
        ModelSpec::RandomBigram { vocab, sharpness, seed } => Some(TableLm::random_bigram(*vocab, *sharpness, *seed)),
        ModelSpec::RandomSoftmax { vocab, scale, seed } => Some(TableLm::random_softmax(*vocab, *scale, *seed)),
        ModelSpec::Ngram { .. } => None,
    })
}

/// A scenario with its models, prompts and profile built once, so sweeps
/// only re-run the simulation.
#[derive(Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub target: Arc<dyn LanguageModel>,
    pub draft: Arc<dyn LanguageModel>,
    pub profile: Option<ProfileResult>,
    prompts: Vec<Vec<TokenId>>,
    trace: Option<Arc<TraceImportance>>,
}

impl Prepared {
    pub fn new(scenario: Scenario) -> Result<Self, BenchError> {
        scenario.validate()?;
        let target = load_model(&scenario, &scenario.models.target)?;
        let base: Arc<dyn LanguageModel> = match &scenario.models.draft {
            DraftSpec::SameAsTarget => target.clone(),
            DraftSpec::Perturbed { mix, sharpness, seed } => {
                let table = load_table(&scenario, &scenario.models.target)?.ok_or_else(|| {
                    BenchError::Invalid("models.draft: perturbed drafts need a table-backed target".into())
                })?;
                Arc::new(table.perturbed(*mix, *sharpness, *seed))
            }
            DraftSpec::LogitNoise { sigma, seed } => {
                let table = load_table(&scenario, &scenario.models.target)?.ok_or_else(|| {
                    BenchError::Invalid("models.draft: logit_noise drafts need a table-backed target".into())
                })?;
                Arc::new(table.logit_noise(*sigma, *seed))
            }
            DraftSpec::Model { model } => load_model(&scenario, model)?,
        };
        if base.vocab_size() != target.vocab_size() {
            return Err(BenchError::Invalid(format!(
                "models: draft vocab {} differs from target vocab {}",
                base.vocab_size(),
                target.vocab_size()
            )));
        }
        let l = &scenario.models.draft_layers;
        let draft: Arc<dyn LanguageModel> = Arc::new(LayeredLm::new(
            base,
            l.layers,
            NoiseSchedule {
                amplitude: l.amplitude,
                decay: l.decay,
            },
            l.seed,
        )?);
        let prompts = match &scenario.workload {
            WorkloadSpec::Synthetic { .. } => Vec::new(),
            WorkloadSpec::File { path } => {
                let full = scenario.resolve(path);
                let text = fs::read_to_string(&full).map_err(io_err(&full))?;
                let prompts = parse_prompts(&text, target.vocab_size()).map_err(|msg| BenchError::Config {
                    path: full.clone(),
                    msg,
                })?;
                if prompts.is_empty() {
                    return Err(BenchError::Config {
                        path: full,
                        msg: "no prompts".into(),
                    });
                }
                prompts
            }
        };
        let trace = match &scenario.importance {
            ImportanceSpec::Trace { path } => {
                let full = scenario.resolve(path);
                Some(Arc::new(
                    TraceImportance::load(&full).map_err(|source| BenchError::Model { path: full, source })?,
                ))
            }
            _ => None,
        };
        let mut prepared = Self {
            scenario,
            target,
            draft,
            profile: None,
            prompts,
            trace,
        };
        prepared.profile = match prepared.scenario.profile.clone() {
            None => None,
            Some(ProfileSpec::File { path }) => Some(ProfileResult::load(prepared.scenario.resolve(&path))?),
            Some(ProfileSpec::Auto { prompts }) => Some(prepared.run_profile(prompts)?),
        };
        Ok(prepared)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        Self::new(Scenario::load(path)?)
    }

    fn vocab(&self) -> usize {
        self.target.vocab_size()
    }

    /// Prompt of session `i`.
    pub fn prompt(&self, i: usize) -> Vec<TokenId> {
        match &self.scenario.workload {
            WorkloadSpec::Synthetic { prompt_len, seed } => {
                synthetic_prompt(*prompt_len, self.vocab(), mix64(*seed ^ WORKLOAD_STREAM), i as u64)
            }
            WorkloadSpec::File { .. } => self.prompts[i % self.prompts.len()].clone(),
        }
    }

    fn max_prompt_len(&self) -> usize {
        match &self.scenario.workload {
            WorkloadSpec::Synthetic { prompt_len, .. } => *prompt_len,
            WorkloadSpec::File { .. } => self.prompts.iter().map(Vec::len).max().unwrap_or(0),
        }
    }

    /// Importance provider for session `i`.
    pub fn importance(&self, i: u64) -> Arc<dyn ImportanceProvider> {
        match &self.scenario.importance {
            ImportanceSpec::Entropy => Arc::new(EntropyImportance::new(self.draft.clone())),
            ImportanceSpec::Trace { .. } => self.trace.clone().expect("loaded in new"),
            ImportanceSpec::Lomax { shape, seed } => {
                let s = &self.scenario.session;
                let len = self.max_prompt_len() + s.max_len + s.gamma + s.delta + 1;
                Arc::new(TraceImportance::lomax(
                    len,
                    *shape,
                    mix64(*seed ^ IMPORTANCE_STREAM) ^ i,
                ))
            }
        }
    }

    /// Profiles `count` synthetic prompts with this scenario's models.
    pub fn run_profile(&self, count: usize) -> Result<ProfileResult, BenchError> {
        let vocab = self.vocab();
        let len = self.max_prompt_len().max(1);
        let prompts: Vec<_> = (0..count as u64)
            .map(|i| synthetic_prompt(len, vocab, mix64(self.scenario.seed ^ PROFILE_STREAM), i))
            .collect();
        let importance: Vec<_> = (0..count as u64)
            .map(|i| self.importance(PROFILE_STREAM << 32 | i))
            .collect();
        let options = self.scenario.device_options()?;
        Ok(profile(
            self.draft.clone(),
            self.target.clone(),
            &importance,
            &prompts,
            &self.scenario.session_config(),
            &options,
            format!("scenario {} ({} prompts)", self.scenario.name, count),
        )?)
    }

    /// Effective policy: profiled thresholds at the session budget, else the
    /// inline policy.
    pub fn policy(&self) -> Result<OffloadPolicyState, BenchError> {
        match &self.profile {
            Some(p) => Ok(p.policy(self.scenario.session.budget, &self.scenario.policy)?),
            None => Ok(self.scenario.policy.clone()),
        }
    }

    /// Session start times: Poisson arrivals at `arrival_rate`.
    pub fn start_times(&self) -> Vec<f64> {
        let n = self.scenario.sessions;
        if self.scenario.arrival_rate == 0.0 {
            return vec![0.0; n];
        }
        let mut rng = stream_rng(self.scenario.seed, 0xa221);
        let mut t = 0.0;
        (0..n)
            .map(|i| {
                if i > 0 {
                    let u: f64 = rng.random();
                    t += -(1.0 - u).ln() / self.scenario.arrival_rate;
                }
                t
            })
            .collect()
    }

    pub fn setup(&self) -> Result<SimSetup, BenchError> {
        let s = &self.scenario;
        let sessions = self
            .start_times()
            .into_iter()
            .enumerate()
            .map(|(i, start)| SimSession {
                id: SessionId(i as u64),
                start,
                prompt: self.prompt(i),
                importance: self.importance(i as u64),
            })
            .collect();
        Ok(SimSetup {
            config: s.session_config(),
            policy: self.policy()?,
            options: s.device_options()?,
            draft: self.draft.clone(),
            target: self.target.clone(),
            channel: s.channel,
            cloud: s.cloud.clone(),
            sessions,
            kill_at: s.kill_at,
            audit: s.audit,
        })
    }

    pub fn simulate(&self) -> Result<SimOutput, BenchError> {
        Ok(simulate(self.setup()?)?)
    }

    pub fn run(&self) -> Result<RunOutput, BenchError> {
        let sim = self.simulate()?;
        let report = MetricsReport::compute(&self.scenario, &sim);
        Ok(RunOutput { report, sim })
    }

    /// Copy with one knob changed. Models and profile are reused.
    pub fn with_knob(&self, knob: Knob, value: f64) -> Result<Self, BenchError> {
        let mut p = self.clone();
        let s = &mut p.scenario;
        match knob {
            Knob::Budget => s.session.budget = value,
            Knob::Bandwidth => s.channel.bandwidth_bps = value,
            Knob::SessionCount => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(BenchError::Invalid(format!(
                        "session_count: {value} is not a positive integer"
                    )));
                }
                s.sessions = value as usize;
            }
            Knob::ArrivalRate => s.arrival_rate = value,
            Knob::ExitThreshold => s.policy.margin_threshold = value,
        }
        s.validate()?;
        Ok(p)
    }
}

fn synthetic_prompt(len: usize, vocab: usize, seed: u64, i: u64) -> Vec<TokenId> {
    let mut rng = stream_rng(seed, i);
    (0..len).map(|_| TokenId(rng.random_range(0..vocab as u32))).collect()
}

fn parse_prompts(text: &str, vocab: usize) -> Result<Vec<Vec<TokenId>>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let prompt = line
            .split_whitespace()
            .map(|w| match w.parse::<u32>() {
                Ok(t) if (t as usize) < vocab => Ok(TokenId(t)),
                _ => Err(format!("line {}: `{w}` is not a token id below {vocab}", n + 1)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(prompt);
    }
    Ok(out)
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub sim: SimOutput,
}

/// Cloud cost proxy `T * W / pf`.
pub fn estimate_cost(pf: f64, mean_tbt: f64, offload_fraction: f64) -> f64 {
    debug_assert!(pf > 0.0);
    mean_tbt * offload_fraction / pf
}

/// Published packing factors: instances of a model that fit one serving
/// cluster, relative to a 70B model.
pub const PACKING_FACTORS: &[(&str, f64)] = &[
    ("llama-2-70b", 1.0),
    ("llama-2-13b", 6.0),
    ("llama-2-7b", 13.0),
    ("tinyllama-1.1b", 86.0),
    ("llama-160m", 558.0),
    ("yi-34b", 2.0),
    ("yi-6b", 15.0),
    ("falcon-40b", 2.0),
    ("falcon-7b", 13.0),
];

pub fn packing_factor(model: &str) -> Option<f64> {
    PACKING_FACTORS
        .iter()
        .find(|(m, _)| m.eq_ignore_ascii_case(model))
        .map(|&(_, pf)| pf)
}

/// Aggregate metrics of one run; one row of a sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub sessions: usize,
    pub tokens: usize,
    /// Seconds per generated token, pooled over sessions.
    pub mean_tbt: f64,
    /// Tokens decided by the cloud (accepted or corrected) over all tokens.
    pub offload_fraction: f64,
    /// Tokens drafted locally and kept, including adopted branch tokens.
    pub local_fraction: f64,
    /// Tokens generated after a link failure.
    pub fallback_fraction: f64,
    /// Offloaded chunks over chunks the policy considered.
    pub decision_rate: f64,
    pub acceptance_rate: f64,
    /// Predicted rejection position equal to the actual one.
    pub hit_rate: f64,
    pub adoption_rate: f64,
    pub fallback_count: usize,
    pub packing_factor: f64,
    pub cost: f64,
    pub offloads: usize,
    /// Send to verdict, seconds, as seen by the device.
    pub mean_round_trip: f64,
    /// Cloud arrival to response, seconds.
    pub mean_latency: f64,
    pub latency_p50: f64,
    pub latency_p99: f64,
    /// Verification requests served per second of makespan.
    pub throughput: f64,
    pub arrival_rate: f64,
    pub makespan: f64,
    pub stall_time: f64,
    pub masked_time: f64,
    pub layers_per_token: f64,
    pub mean_batch_size: f64,
    pub prefill_preemptions: usize,
    pub resyncs: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub cache_violations: usize,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::profiler::quantile(&v, q).unwrap_or(0.0)
}

impl MetricsReport {
    pub fn compute(scenario: &Scenario, sim: &SimOutput) -> Self {
        let sum = |f: fn(&SessionSummary) -> usize| sim.sessions.iter().map(|s| f(&s.summary)).sum::<usize>();
        let sumf = |f: fn(&SessionSummary) -> f64| sim.sessions.iter().map(|s| f(&s.summary)).sum::<f64>();
        let (mut cloud, mut local, mut fallback) = (0usize, 0usize, 0usize);
        for r in sim.sessions.iter().flat_map(|s| &s.records) {
            match r.source {
                TokenSource::CloudAccepted | TokenSource::CloudCorrected => cloud += 1,
                _ if r.fallback => fallback += 1,
                _ => local += 1,
            }
        }
        let tokens = cloud + local + fallback;
        let n = tokens as f64;
        let busy: f64 = sim
            .sessions
            .iter()
            .map(|s| s.summary.end_time - s.summary.start_time)
            .sum();
        let mean_tbt = ratio(busy, n);
        let offload_fraction = ratio(cloud as f64, n);
        let start = sim
            .sessions
            .iter()
            .map(|s| s.summary.start_time)
            .fold(f64::INFINITY, f64::min);
        let end = sim
            .sessions
            .iter()
            .map(|s| s.summary.end_time)
            .fold(f64::NEG_INFINITY, f64::max);
        let makespan = if tokens > 0 { (end - start).max(0.0) } else { 0.0 };
        let trips: Vec<f64> = sim
            .sessions
            .iter()
            .flat_map(|s| &s.offloads)
            .filter_map(|o| o.resolved_at.map(|r| r - o.sent_at))
            .collect();
        let predictions = sum(|s| s.predictions) as f64;
        Self {
            scenario: scenario.name.clone(),
            sessions: sim.sessions.len(),
            tokens,
            mean_tbt,
            offload_fraction,
            local_fraction: ratio(local as f64, n),
            fallback_fraction: ratio(fallback as f64, n),
            decision_rate: ratio(sum(|s| s.chunks_offloaded) as f64, sum(|s| s.chunks_considered) as f64),
            acceptance_rate: ratio(
                sum(|s| s.draft_tokens_accepted) as f64,
                sum(|s| s.draft_tokens_offloaded) as f64,
            ),
            hit_rate: ratio(sum(|s| s.position_hits) as f64, predictions),
            adoption_rate: ratio(sum(|s| s.adoptions) as f64, predictions),
            fallback_count: sim.sessions.iter().filter(|s| s.summary.fallback).count(),
            packing_factor: scenario.packing_factor,
            cost: estimate_cost(scenario.packing_factor, mean_tbt, offload_fraction),
            offloads: sum(|s| s.chunks_offloaded),
            mean_round_trip: ratio(trips.iter().sum(), trips.len() as f64),
            mean_latency: ratio(sim.latencies.iter().sum(), sim.latencies.len() as f64),
            latency_p50: percentile(&sim.latencies, 0.5),
            latency_p99: percentile(&sim.latencies, 0.99),
            throughput: ratio(sim.cloud.requests_served as f64, makespan),
            arrival_rate: scenario.arrival_rate,
            makespan,
            stall_time: sumf(|s| s.stall_time),
            masked_time: sumf(|s| s.masked_time),
            layers_per_token: ratio(sum(|s| s.layers_run) as f64, sum(|s| s.tokens_drafted) as f64),
            mean_batch_size: sim.cloud.mean_batch_size,
            prefill_preemptions: sim.cloud.prefill_preemptions,
            resyncs: sim.cloud.resyncs,
            bytes_up: sim.bytes_up,
            bytes_down: sim.bytes_down,
            cache_violations: sim.audit_violations,
        }
    }
}

/// Writes `tokens.csv`, `sessions.jsonl`, `report.json` and
/// `cloud_status.json` into `dir`.
pub fn write_artifacts(dir: &Path, run: &RunOutput) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("tokens.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in run.sim.sessions.iter().flat_map(|s| &s.records) {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("sessions.jsonl");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    for s in &run.sim.sessions {
        writeln!(f, "{}", serde_json::to_string(&s.summary)?).map_err(io_err(&path))?;
    }

    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&run.report)? + "\n").map_err(io_err(&path))?;
    let path = dir.join("cloud_status.json");
    fs::write(&path, serde_json::to_string_pretty(&run.sim.cloud)? + "\n").map_err(io_err(&path))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    Budget,
    /// Bits per second, both directions.
    Bandwidth,
    SessionCount,
    /// Sessions per second.
    ArrivalRate,
    /// Early-exit margin threshold.
    ExitThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub knob: Knob,
    pub value: f64,
    pub report: MetricsReport,
}

pub fn sweep(prepared: &Prepared, knob: Knob, values: &[f64]) -> Result<Vec<SweepRow>, BenchError> {
    values
        .iter()
        .map(|&value| {
            let report = prepared.with_knob(knob, value)?.run()?.report;
            Ok(SweepRow { knob, value, report })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), BenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for (i, r) in rows.iter().enumerate() {
        // csv cannot flatten nested structs; splice the report's own record
        let mut inner = csv::Writer::from_writer(Vec::new());
        inner.serialize(&r.report)?;
        let bytes = inner.into_inner().map_err(|e| e.into_error()).map_err(io_err(path))?;
        let mut rd = csv::Reader::from_reader(bytes.as_slice());
        if i == 0 {
            let mut header = csv::StringRecord::from(vec!["knob", "value"]);
            header.extend(rd.headers()?.iter());
            w.write_record(&header)?;
        }
        let record = rd.records().next().transpose()?.unwrap_or_default();
        let knob = serde_json::to_value(r.knob)?;
        let mut row = csv::StringRecord::from(vec![knob.as_str().unwrap_or_default().to_string(), r.value.to_string()]);
        row.extend(record.iter());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
