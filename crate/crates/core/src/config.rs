//! Run configuration (TOML) and the manifest derived from it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condition::ConditionSpec;
use crate::ensemble::{AblationSpec, EnsembleSpec};
use crate::error::{io, Error, Result};
use crate::gateway::{ModelSpec, RetryPolicy, DEFAULT_API_KEY_ENV};
use crate::scoring::{DEFAULT_THETA, SWEEP_THETAS};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_SC_SAMPLES: u32 = 20;

fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_sweep() -> Vec<f64> {
    SWEEP_THETAS.to_vec()
}
fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}
fn default_workers() -> usize {
    4
}
fn default_concurrency() -> usize {
    4
}
fn default_sc_samples() -> u32 {
    DEFAULT_SC_SAMPLES
}
fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfConsistencySpec {
    pub models: Vec<String>,
    /// Condition labels.
    pub conditions: Vec<String>,
    #[serde(default = "default_sc_samples")]
    pub k: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Benchmark JSON, relative to the config file.
    pub benchmark: PathBuf,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_sweep")]
    pub sweep_thetas: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: usize,
    /// Worker threads for inference.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Maximum concurrent cells per HTTP endpoint.
    #[serde(default = "default_concurrency")]
    pub endpoint_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierConfig>,
    #[serde(default)]
    pub conditions: Vec<ConditionSpec>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensembles: Vec<EnsembleSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablations: Vec<AblationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_consistency: Option<SelfConsistencySpec>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn benchmark_path(&self) -> PathBuf {
        self.resolve(&self.benchmark)
    }

    /// Conditions with context directories resolved against the config.
    pub fn resolved_conditions(&self) -> Vec<ConditionSpec> {
        self.conditions
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.context_dir = c.context_dir.as_deref().map(|d| self.resolve(d));
                c
            })
            .collect()
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn condition(&self, label: &str) -> Option<&ConditionSpec> {
        self.conditions.iter().find(|c| c.label() == label)
    }

    /// Ensembles plus one extra spec per ablation replacement.
    pub fn expanded_ensembles(&self) -> Result<Vec<EnsembleSpec>> {
        let mut out = self.ensembles.clone();
        for ab in &self.ablations {
            let base = self
                .ensembles
                .iter()
                .find(|e| e.name == ab.ensemble)
                .ok_or_else(|| Error::Config(format!("ablation refers to unknown ensemble {}", ab.ensemble)))?;
            out.extend(ab.expand(base)?);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Config("at least one condition is required".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        if self.sweep_thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("sweep thresholds must lie in [0, 1]".into()));
        }
        if self.bootstrap_replicates == 0 {
            return Err(Error::Config("bootstrap_replicates must be >= 1".into()));
        }
        if self.workers == 0 || self.endpoint_concurrency == 0 {
            return Err(Error::Config("workers and endpoint_concurrency must be >= 1".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate model {}", m.name)));
            }
        }
        let mut labels = BTreeSet::new();
        for c in &self.conditions {
            c.validate()?;
            if !labels.insert(c.label()) {
                return Err(Error::Config(format!("duplicate condition {}", c.label())));
            }
        }
        let known_model = |m: &str| {
            if names.contains(m) {
                Ok(())
            } else {
                Err(Error::Config(format!("unknown model {m}")))
            }
        };
        let mut ensemble_names = BTreeSet::new();
        for e in self.expanded_ensembles()? {
            e.validate()?;
            if !ensemble_names.insert(e.name.clone()) {
                return Err(Error::Config(format!("duplicate ensemble {}", e.name)));
            }
            e.members.iter().try_for_each(|m| known_model(m))?;
        }
        if let Some(sc) = &self.self_consistency {
            if sc.k == 0 {
                return Err(Error::Config("self_consistency.k must be >= 1".into()));
            }
            if sc.models.is_empty() || sc.conditions.is_empty() {
                return Err(Error::Config("self_consistency needs models and conditions".into()));
            }
            sc.models.iter().try_for_each(|m| known_model(m))?;
            for c in &sc.conditions {
                if !labels.contains(c.as_str()) {
                    return Err(Error::Config(format!("self_consistency refers to unknown condition {c}")));
                }
            }
        }
        Ok(())
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub software_version: String,
    pub seed: u64,
    pub benchmark: PathBuf,
    pub benchmark_name: String,
    pub benchmark_sha256: String,
    pub question_count: usize,
    pub theta: f64,
    pub sweep_thetas: Vec<f64>,
    pub bootstrap_replicates: usize,
    pub retry: RetryPolicy,
    pub verifier: Option<VerifierConfig>,
    /// Verifier system prompt as sent for five-option questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_system_prompt: Option<String>,
    pub conditions: Vec<ConditionSpec>,
    pub models: Vec<ModelSpec>,
    pub ensembles: Vec<EnsembleSpec>,
    pub ablations: Vec<AblationSpec>,
    pub self_consistency: Option<SelfConsistencySpec>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, benchmark_name: &str, benchmark_sha256: &str, question_count: usize) -> Self {
        let mut m = RunManifest {
            run_id: String::new(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            benchmark: cfg.benchmark.clone(),
            benchmark_name: benchmark_name.to_string(),
            benchmark_sha256: benchmark_sha256.to_string(),
            question_count,
            theta: cfg.theta,
            sweep_thetas: cfg.sweep_thetas.clone(),
            bootstrap_replicates: cfg.bootstrap_replicates,
            retry: cfg.retry.clone(),
            verifier: cfg.verifier.clone(),
            verifier_system_prompt: cfg
                .verifier
                .as_ref()
                .map(|_| crate::resolution::verifier_system_prompt(crate::ballot::MAX_OPTIONS)),
            conditions: cfg.conditions.clone(),
            models: cfg.models.clone(),
            ensembles: cfg.ensembles.clone(),
            ablations: cfg.ablations.clone(),
            self_consistency: cfg.self_consistency.clone(),
        };
        m.run_id = match &cfg.run_id {
            Some(id) => id.clone(),
            None => format!("run-{}", &m.content_hash()[..12]),
        };
        m
    }

    /// SHA-256 of the manifest with the run id blanked.
    pub fn content_hash(&self) -> String {
        let mut m = self.clone();
        m.run_id.clear();
        let bytes = serde_json::to_vec(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
