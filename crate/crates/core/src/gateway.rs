//! Model specs, decoding parameters and generation backends.
//!
//! Two backends exist: an OpenAI-compatible HTTP client and a deterministic
//! simulator whose draws are keyed by `(seed, model, question, condition,
//! rep)`, so simulated runs never depend on scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ballot::{Ballot, Letter, MAX_OPTIONS};
use crate::benchmark::Question;
use crate::condition::PromptBundle;
use crate::error::{Error, Result};
use crate::resolution::Resolution;

pub const SIMULATED_ENDPOINT: &str = "simulated";
pub const DEFAULT_API_KEY_ENV: &str = "SAFESCALE_API_KEY";

fn default_repetitions() -> u32 {
    20
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeBucket {
    #[serde(rename = "<2B")]
    Under2B,
    #[serde(rename = "2-9B")]
    From2To9B,
    #[serde(rename = "10-29B")]
    From10To29B,
    #[serde(rename = "30-99B")]
    From30To99B,
    #[serde(rename = "100-299B")]
    From100To299B,
    #[serde(rename = ">=300B")]
    AtLeast300B,
}

impl SizeBucket {
    pub fn from_billions(params: f64) -> SizeBucket {
        match params {
            p if p < 2.0 => SizeBucket::Under2B,
            p if p < 10.0 => SizeBucket::From2To9B,
            p if p < 30.0 => SizeBucket::From10To29B,
            p if p < 100.0 => SizeBucket::From30To99B,
            p if p < 300.0 => SizeBucket::From100To299B,
            _ => SizeBucket::AtLeast300B,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeBucket::Under2B => "<2B",
            SizeBucket::From2To9B => "2-9B",
            SizeBucket::From10To29B => "10-29B",
            SizeBucket::From30To99B => "30-99B",
            SizeBucket::From100To299B => "100-299B",
            SizeBucket::AtLeast300B => ">=300B",
        }
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: String,
    pub param_count_billions: f64,
    /// Base URL of an OpenAI-compatible server, or `"simulated"`.
    pub endpoint: String,
    /// Repetitions per cell (k_m).
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub reasoning: bool,
    pub max_context_tokens: u64,
    /// Model id sent on the wire; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_model: Option<String>,
    /// Request all repetitions in one call via the `n` parameter.
    #[serde(default)]
    pub batch_via_n: bool,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationProfile>,
}

impl ModelSpec {
    pub fn simulated(name: &str, family: &str, params: f64, profile: SimulationProfile) -> Self {
        ModelSpec {
            name: name.into(),
            family: family.into(),
            param_count_billions: params,
            endpoint: SIMULATED_ENDPOINT.into(),
            repetitions: 20,
            reasoning: false,
            max_context_tokens: 131_072,
            api_model: None,
            batch_via_n: false,
            api_key_env: default_api_key_env(),
            simulation: Some(profile),
        }
    }

    pub fn size_bucket(&self) -> SizeBucket {
        SizeBucket::from_billions(self.param_count_billions)
    }

    pub fn is_simulated(&self) -> bool {
        self.endpoint == SIMULATED_ENDPOINT
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("model name must not be empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config(format!("model {}: repetitions must be >= 1", self.name)));
        }
        if !(self.param_count_billions.is_finite() && self.param_count_billions > 0.0) {
            return Err(Error::Config(format!(
                "model {}: param_count_billions must be positive",
                self.name
            )));
        }
        if self.is_simulated() && self.simulation.is_none() {
            return Err(Error::Config(format!(
                "model {}: simulated endpoint needs a simulation profile",
                self.name
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decoding parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Greedy,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n: u32,
    pub logprobs_requested: bool,
    pub top_logprobs: u32,
}

pub fn select_decoding_params(regime: Regime, reasoning: bool) -> DecodingParams {
    match (regime, reasoning) {
        (Regime::Greedy, false) => DecodingParams {
            temperature: 0.0,
            max_tokens: 10,
            n: 1,
            logprobs_requested: true,
            top_logprobs: 5,
        },
        (Regime::Greedy, true) => DecodingParams {
            temperature: 0.0,
            max_tokens: 4096,
            n: 1,
            logprobs_requested: false,
            top_logprobs: 0,
        },
        (Regime::Stochastic, false) => DecodingParams {
            temperature: 0.7,
            max_tokens: 10,
            n: 20,
            logprobs_requested: false,
            top_logprobs: 0,
        },
        (Regime::Stochastic, true) => DecodingParams {
            temperature: 0.7,
            max_tokens: 4096,
            n: 20,
            logprobs_requested: false,
            top_logprobs: 0,
        },
    }
}

// ---------------------------------------------------------------------------
// Generation records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub model: String,
    pub question_id: String,
    pub condition: String,
    pub rep_index: u32,
    pub raw_text: String,
    pub latency_seconds: f64,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
}

impl GenerationRecord {
    pub fn ballot(&self) -> Option<Ballot> {
        self.resolution.as_ref().map(|r| r.ballot)
    }
}

/// Identifies one sample for the simulator's counter-based stream.
#[derive(Debug, Clone, Copy)]
pub struct SampleKey<'a> {
    pub seed: u64,
    pub model: &'a str,
    pub question_id: &'a str,
    pub condition: &'a str,
    pub rep_index: u32,
}

impl SampleKey<'_> {
    fn rng(&self) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for part in [self.model, self.question_id, self.condition] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update(self.rep_index.to_le_bytes());
        ChaCha20Rng::from_seed(h.finalize().into())
    }
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongSplit {
    /// Wrong mass shared equally by all wrong options.
    #[default]
    Uniform,
    /// Wrong mass on the alphabetically first wrong option.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BallotSpec {
    /// Explicit probabilities keyed by letter or `"null"`.
    Explicit { distribution: BTreeMap<String, f64> },
    /// Probability of the correct letter and of null; the rest goes to wrong
    /// options according to `wrong`.
    Relative {
        correct: f64,
        #[serde(default)]
        null: f64,
        #[serde(default)]
        wrong: WrongSplit,
    },
}

impl Default for BallotSpec {
    fn default() -> Self {
        BallotSpec::Relative {
            correct: 1.0,
            null: 0.0,
            wrong: WrongSplit::Uniform,
        }
    }
}

/// Probabilities over `[A, B, C, D, E, null]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallotDistribution {
    option_count: usize,
    probs: [f64; MAX_OPTIONS + 1],
}

impl BallotDistribution {
    pub fn new(option_count: usize, probs: [f64; MAX_OPTIONS + 1]) -> Result<Self> {
        if !(1..=MAX_OPTIONS).contains(&option_count) {
            return Err(Error::InvalidDistribution(format!("option count {option_count}")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("negative or non-finite probability".into()));
        }
        if probs[option_count..MAX_OPTIONS].iter().any(|&p| p > 0.0) {
            return Err(Error::InvalidDistribution("mass on a letter outside the option range".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {sum}")));
        }
        Ok(BallotDistribution { option_count, probs })
    }

    pub fn from_map(option_count: usize, map: &BTreeMap<String, f64>) -> Result<Self> {
        let mut probs = [0.0; MAX_OPTIONS + 1];
        for (k, &p) in map {
            let slot = if k.eq_ignore_ascii_case("null") {
                MAX_OPTIONS
            } else {
                k.parse::<Letter>()
                    .map_err(Error::InvalidDistribution)?
                    .index()
            };
            probs[slot] += p;
        }
        BallotDistribution::new(option_count, probs)
    }

    pub fn option_count(&self) -> usize {
        self.option_count
    }

    pub fn prob(&self, b: Ballot) -> f64 {
        self.probs[b.slot()]
    }

    /// Draws a ballot for a uniform `u` in [0, 1).
    pub fn pick(&self, u: f64) -> Ballot {
        let mut acc = 0.0;
        let mut last = Ballot::Null;
        for b in Letter::range(self.option_count)
            .map(Ballot::Valid)
            .chain(std::iter::once(Ballot::Null))
        {
            let p = self.prob(b);
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = b;
            if u < acc {
                return b;
            }
        }
        last
    }
}

impl BallotSpec {
    pub fn resolve(&self, q: &Question) -> Result<BallotDistribution> {
        let n = q.option_count();
        match self {
            BallotSpec::Explicit { distribution } => BallotDistribution::from_map(n, distribution),
            BallotSpec::Relative { correct, null, wrong } => {
                let mut probs = [0.0; MAX_OPTIONS + 1];
                let rest = 1.0 - correct - null;
                if rest < -1e-12 {
                    return Err(Error::InvalidDistribution(format!(
                        "correct {correct} + null {null} exceeds 1"
                    )));
                }
                let rest = rest.max(0.0);
                probs[q.correct_index] = *correct;
                probs[MAX_OPTIONS] = *null;
                let wrong_slots: Vec<usize> = (0..n).filter(|&j| j != q.correct_index).collect();
                match wrong {
                    WrongSplit::Uniform => {
                        for &j in &wrong_slots {
                            probs[j] = rest / wrong_slots.len() as f64;
                        }
                    }
                    WrongSplit::First => probs[wrong_slots[0]] = rest,
                }
                BallotDistribution::new(n, probs)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionOverride {
    pub question_id: String,
    /// Applies to every condition when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub spec: BallotSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationProfile {
    #[serde(default)]
    pub default: BallotSpec,
    /// Per-condition defaults keyed by condition label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conditions: BTreeMap<String, BallotSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<DistributionOverride>,
    /// Mean simulated latency per call in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
    /// Regime-specific replacements (e.g. a greedy profile for single-output runs).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub regimes: BTreeMap<String, Box<SimulationProfile>>,
}

impl SimulationProfile {
    pub fn uniform(spec: BallotSpec) -> Self {
        SimulationProfile {
            default: spec,
            ..Default::default()
        }
    }

    pub fn for_regime(&self, regime: Regime) -> &SimulationProfile {
        let key = match regime {
            Regime::Greedy => "greedy",
            Regime::Stochastic => "stochastic",
        };
        self.regimes.get(key).map_or(self, |p| p.as_ref())
    }

    pub fn distribution(&self, q: &Question, condition: &str) -> Result<BallotDistribution> {
        let exact = self
            .overrides
            .iter()
            .find(|o| o.question_id == q.id && o.condition.as_deref() == Some(condition));
        let any = || {
            self.overrides
                .iter()
                .find(|o| o.question_id == q.id && o.condition.is_none())
        };
        let spec = exact
            .or_else(any)
            .map(|o| &o.spec)
            .or_else(|| self.conditions.get(condition))
            .unwrap_or(&self.default);
        spec.resolve(q)
    }
}

const NULL_TEXTS: [&str; 3] = [
    "I cannot determine the answer from the information given.",
    "Insufficient information.",
    "",
];

/// Deterministic simulated generation: draws one ballot for `key` and renders
/// it as model-like text. Null draws become unparsable text.
pub fn simulated_generate(key: SampleKey<'_>, dist: &BallotDistribution) -> String {
    let mut rng = key.rng();
    let ballot = dist.pick(rng.gen::<f64>());
    let style: u32 = rng.gen_range(0..4);
    match ballot {
        Ballot::Valid(l) => match style {
            0 => l.to_string(),
            1 => format!("{l}."),
            2 => format!("Answer: {l}"),
            _ => l.to_string().to_ascii_lowercase(),
        },
        Ballot::Null => NULL_TEXTS[style as usize % NULL_TEXTS.len()].to_string(),
    }
}

fn simulated_latency(key: SampleKey<'_>, model: &ModelSpec, profile: &SimulationProfile) -> f64 {
    let mut rng = key.rng();
    let _ = rng.gen::<f64>();
    let _ = rng.gen_range(0..4u32);
    let base = profile
        .latency_seconds
        .unwrap_or(0.05 + 0.002 * model.param_count_billions);
    let jitter: f64 = rng.gen_range(0.5..1.5);
    // Quantise to microseconds so serialized values are short and stable.
    ((base * jitter) * 1e6).round() / 1e6
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n: u32,
    pub logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

impl ChatRequest {
    pub fn new(model: &str, prompt: &PromptBundle, params: &DecodingParams, n: u32) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system_prompt.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user_prompt.clone(),
                },
            ],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n,
            logprobs: params.logprobs_requested,
            top_logprobs: params.logprobs_requested.then_some(params.top_logprobs),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatChoice {
    #[serde(default)]
    index: u32,
    message: ChatChoiceMessage,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    /// Timeouts, connection failures, 408/429/5xx.
    Transient(String),
    /// 401/403.
    Auth,
    /// Any other non-retryable failure.
    Permanent(String),
}

pub trait ChatBackend: Send + Sync {
    /// Returns one text per returned choice, in choice order.
    fn chat(&self, req: &ChatRequest) -> std::result::Result<Vec<String>, CallError>;

    fn endpoint(&self) -> &str;
}

pub struct OpenAiClient {
    url: String,
    base: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiClient {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        let trimmed = base_url.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else if trimmed.ends_with("/v1") {
            format!("{trimmed}/chat/completions")
        } else {
            format!("{trimmed}/v1/chat/completions")
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(OpenAiClient {
            url,
            base: base_url.to_string(),
            api_key,
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ChatBackend for OpenAiClient {
    fn chat(&self, req: &ChatRequest) -> std::result::Result<Vec<String>, CallError> {
        let mut builder = self.client.post(&self.url).json(req);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| CallError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(CallError::Auth);
        }
        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            return Err(CallError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(CallError::Permanent(format!("HTTP {status}: {body}")));
        }
        let parsed: ChatCompletionResponse = resp
            .json()
            .map_err(|e| CallError::Permanent(format!("bad response body: {e}")))?;
        let mut choices = parsed.choices;
        choices.sort_by_key(|c| c.index);
        Ok(choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }

    fn endpoint(&self) -> &str {
        &self.base
    }
}

// ---------------------------------------------------------------------------
// Retry policy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_seconds: Vec<f64>,
    pub timeout_seconds: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_seconds: vec![1.0, 4.0, 16.0],
            timeout_seconds: 120.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            backoff_seconds: vec![0.0],
            timeout_seconds: 30.0,
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let secs = self
            .backoff_seconds
            .get(retry as usize)
            .or(self.backoff_seconds.last())
            .copied()
            .unwrap_or(0.0);
        Duration::from_secs_f64(secs.max(0.0))
    }
}

/// Outcome of one retried call.
pub struct CallOutcome {
    pub result: std::result::Result<Vec<String>, CallError>,
    pub attempts: u32,
    /// Wall-clock duration of the successful (or last) attempt.
    pub latency_seconds: f64,
}

pub fn call_with_retry(backend: &dyn ChatBackend, req: &ChatRequest, policy: &RetryPolicy) -> CallOutcome {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let start = Instant::now();
        let result = backend.chat(req);
        let latency_seconds = start.elapsed().as_secs_f64();
        match result {
            Err(CallError::Transient(msg)) if attempts <= policy.max_retries => {
                log::warn!("{}: attempt {attempts} failed: {msg}", backend.endpoint());
                std::thread::sleep(policy.backoff(attempts - 1));
            }
            result => {
                return CallOutcome {
                    result,
                    attempts,
                    latency_seconds,
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Everything a backend needs to produce the samples of one cell.
pub struct CellRequest<'a> {
    pub seed: u64,
    pub model: &'a ModelSpec,
    pub question: &'a Question,
    pub condition: &'a str,
    pub prompt: &'a PromptBundle,
    pub params: &'a DecodingParams,
    pub regime: Regime,
}

pub enum Generator {
    Simulated,
    Http(Box<dyn ChatBackend>),
}

impl Generator {
    /// Builds the generator for a model; HTTP credentials come from the
    /// model's `api_key_env` variable.
    pub fn for_model(model: &ModelSpec, policy: &RetryPolicy) -> Result<Generator> {
        if model.is_simulated() {
            return Ok(Generator::Simulated);
        }
        let key = std::env::var(&model.api_key_env).ok();
        let client = OpenAiClient::new(
            &model.endpoint,
            key,
            Duration::from_secs_f64(policy.timeout_seconds.max(0.001)),
        )?;
        Ok(Generator::Http(Box::new(client)))
    }
}

/// Produces exactly `k` records for a cell. Per-call failures that exhaust
/// retries yield empty-text records; a cell where every call failed is an
/// error, as is an authentication rejection.
pub fn generate_samples(
    generator: &Generator,
    req: &CellRequest<'_>,
    k: u32,
    policy: &RetryPolicy,
) -> Result<Vec<GenerationRecord>> {
    if k == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let record = |rep: u32, raw_text: String, latency: f64, attempts: u32, error: Option<String>| {
        GenerationRecord {
            model: req.model.name.clone(),
            question_id: req.question.id.clone(),
            condition: req.condition.to_string(),
            rep_index: rep,
            raw_text,
            latency_seconds: latency,
            attempts,
            error,
            resolution: None,
        }
    };

    match generator {
        Generator::Simulated => {
            let profile = req
                .model
                .simulation
                .as_ref()
                .ok_or_else(|| Error::Config(format!("model {} has no simulation profile", req.model.name)))?
                .for_regime(req.regime);
            let dist = profile.distribution(req.question, req.condition)?;
            Ok((0..k)
                .map(|rep| {
                    let key = SampleKey {
                        seed: req.seed,
                        model: &req.model.name,
                        question_id: &req.question.id,
                        condition: req.condition,
                        rep_index: rep,
                    };
                    let text = simulated_generate(key, &dist);
                    record(rep, text, simulated_latency(key, req.model, profile), 1, None)
                })
                .collect())
        }
        Generator::Http(backend) => {
            let api_model = req.model.api_model.as_deref().unwrap_or(&req.model.name);
            let mut records = Vec::with_capacity(k as usize);
            if req.model.batch_via_n {
                let chat = ChatRequest::new(api_model, req.prompt, req.params, k);
                let out = call_with_retry(backend.as_ref(), &chat, policy);
                match out.result {
                    Err(CallError::Auth) => {
                        return Err(Error::Authentication {
                            endpoint: backend.endpoint().to_string(),
                        })
                    }
                    Err(CallError::Transient(m)) | Err(CallError::Permanent(m)) => {
                        return Err(Error::EndpointFailed {
                            endpoint: backend.endpoint().to_string(),
                            attempts: out.attempts,
                            message: m,
                        })
                    }
                    Ok(texts) => {
                        let mut texts = texts.into_iter();
                        for rep in 0..k {
                            match texts.next() {
                                Some(t) => records.push(record(rep, t, out.latency_seconds, out.attempts, None)),
                                None => records.push(record(
                                    rep,
                                    String::new(),
                                    out.latency_seconds,
                                    out.attempts,
                                    Some("missing choice in batched response".into()),
                                )),
                            }
                        }
                    }
                }
            } else {
                let chat = ChatRequest::new(api_model, req.prompt, req.params, 1);
                let mut last_error = None;
                for rep in 0..k {
                    let out = call_with_retry(backend.as_ref(), &chat, policy);
                    match out.result {
                        Err(CallError::Auth) => {
                            return Err(Error::Authentication {
                                endpoint: backend.endpoint().to_string(),
                            })
                        }
                        Err(CallError::Transient(m)) | Err(CallError::Permanent(m)) => {
                            last_error = Some(m.clone());
                            records.push(record(rep, String::new(), out.latency_seconds, out.attempts, Some(m)));
                        }
                        Ok(texts) => {
                            let text = texts.into_iter().next().unwrap_or_default();
                            records.push(record(rep, text, out.latency_seconds, out.attempts, None));
                        }
                    }
                }
                if records.iter().all(|r| r.error.is_some()) {
                    return Err(Error::EndpointFailed {
                        endpoint: backend.endpoint().to_string(),
                        attempts: records.iter().map(|r| r.attempts).sum(),
                        message: last_error.unwrap_or_default(),
                    });
                }
            }
            Ok(records)
        }
    }
}

// ---------------------------------------------------------------------------
// Concurrency limiting

/// Counting semaphore capping concurrent calls per endpoint.
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}
