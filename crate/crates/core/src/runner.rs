//! Experiment orchestration: the main model x question x condition grid,
//! the self-consistency comparison, fixed ensembles, persistence and report
//! emission.
//!
//! Every run lives in `<out>/<run_id>/`. Inference results are appended to
//! JSONL journals while the grid runs and rewritten in sorted order when it
//! finishes, so a rerun with the same manifest resumes where it stopped and
//! simulated runs produce identical bytes regardless of scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ballot::Ballot;
use crate::benchmark::{load_benchmark, validate_benchmark_with, Benchmark, Question, ValidationOptions};
use crate::condition::{build_prompt_with, load_fixed_context, ConditionKind, ConditionSpec, WhitespaceEstimator};
use crate::config::{RunConfig, RunManifest};
use crate::ensemble::{best_member_deltas, evaluate_ensemble, index_cells, BestMemberDelta, EnsembleCell, EnsembleRow};
use crate::error::{io, Error, Result};
use crate::gateway::{
    generate_samples, select_decoding_params, CellRequest, Generator, GenerationRecord, ModelSpec, OpenAiClient,
    Regime, SizeBucket, Semaphore,
};
use crate::resolution::{resolve_ballot, ModelVerifier, Verifier};
use crate::scoring::{score_final, threshold_sweep, Metric, MetricsRow, ScoredCell, ThresholdRule};
use crate::stats::{
    bootstrap_ci, cross_condition_ranking, delta_row, latency_summary, model_average, stratified_report,
    variance_decomposition, BootstrapPlan, CrossConditionRow, DeltaRow, Interval, LatencyRow, PerQuestionValues,
    StratumKind, StratumRow, VarianceComponents, WorstCaseRow, DEFAULT_DELTA_PAIRS, MODEL_AVERAGE,
};
use crate::vote::CellResult;

pub const MAIN_GRID_DIR: &str = "grid";
pub const SC_SINGLE_DIR: &str = "sc/single";
pub const SC_SAMPLED_DIR: &str = "sc/sampled";
const CELLS_FILE: &str = "cells.jsonl";
const GENERATIONS_FILE: &str = "generations.jsonl";
const FAILURES_FILE: &str = "failures.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const INDEX_FILE: &str = "index.json";
const RUN_LOG_FILE: &str = "run_log.json";

/// Metrics with one binary value per question.
const BINARY_METRICS: [Metric; 5] = [
    Metric::Accuracy,
    Metric::HighRisk,
    Metric::Unsafe,
    Metric::Contradiction,
    Metric::DangerOc,
];

// ---------------------------------------------------------------------------
// Context

pub struct RunContext {
    pub config: RunConfig,
    pub manifest: RunManifest,
    pub manifest_hash: String,
    pub benchmark: Benchmark,
    /// Conditions with resolved context directories.
    pub conditions: Vec<ConditionSpec>,
    pub run_dir: PathBuf,
}

impl RunContext {
    /// Validates the config and benchmark, then creates `<out>/<run_id>`.
    /// An existing directory written under a different manifest is refused.
    pub fn prepare(config: RunConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let benchmark = load_benchmark(&config.benchmark_path())?;
        let opts = ValidationOptions {
            require_evidence: config.conditions.iter().any(|c| c.kind.is_evidence()),
        };
        let report = validate_benchmark_with(&benchmark, opts);
        if let Some(v) = report.violations.first() {
            return Err(Error::Schema {
                question_id: v.question_id.clone(),
                message: format!("{}: {}", v.field, v.message),
            });
        }
        let manifest = RunManifest::new(&config, &benchmark.name, &benchmark.content_hash(), benchmark.len());
        let manifest_hash = manifest.content_hash();
        let run_dir = out.join(&manifest.run_id);
        fs::create_dir_all(&run_dir).map_err(|e| io(&run_dir, e))?;
        let manifest_path = run_dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let previous: RunManifest = read_json(&manifest_path)?;
            if previous.content_hash() != manifest_hash {
                return Err(Error::Config(format!(
                    "{} holds a run with a different manifest; use another output directory or run id",
                    run_dir.display()
                )));
            }
        }
        write_json(&manifest_path, &manifest)?;
        let conditions = config.resolved_conditions();
        Ok(RunContext {
            config,
            manifest,
            manifest_hash,
            benchmark,
            conditions,
            run_dir,
        })
    }

    pub fn question(&self, id: &str) -> Result<&Question> {
        self.benchmark
            .get(id)
            .ok_or_else(|| Error::Missing(format!("question {id} is not in the benchmark")))
    }

    pub fn condition(&self, label: &str) -> Option<&ConditionSpec> {
        self.conditions.iter().find(|c| c.label() == label)
    }

    fn size_buckets(&self) -> BTreeMap<String, SizeBucket> {
        self.config.models.iter().map(|m| (m.name.clone(), m.size_bucket())).collect()
    }

    fn condition_labels(&self) -> Vec<String> {
        self.conditions.iter().map(|c| c.label().to_string()).collect()
    }
}

// ---------------------------------------------------------------------------
// Cell store

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Inference failed after retries.
    Failed,
    /// The condition cannot be applied to this model or question.
    Unevaluable,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellFailure {
    pub model: String,
    pub question_id: String,
    pub condition: String,
    pub kind: FailureKind,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completeness {
    pub expected: usize,
    pub completed: usize,
    pub failed: usize,
    pub unevaluable: usize,
}

impl Completeness {
    pub fn is_exact(&self) -> bool {
        self.expected == self.completed + self.failed + self.unevaluable
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridStore {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub resumed: usize,
}

impl GridStore {
    pub fn completeness(&self, expected: usize) -> Completeness {
        let count = |k| self.failures.iter().filter(|f| f.kind == k).count();
        Completeness {
            expected,
            completed: self.cells.len(),
            failed: count(FailureKind::Failed),
            unevaluable: count(FailureKind::Unevaluable),
        }
    }

    /// Reads the sorted journals of a finished experiment.
    pub fn load(dir: &Path) -> Result<Self> {
        let cells_path = dir.join(CELLS_FILE);
        if !cells_path.exists() {
            return Err(Error::Missing(format!("no cell store at {}", cells_path.display())));
        }
        let failures_path = dir.join(FAILURES_FILE);
        Ok(GridStore {
            cells: read_jsonl(&cells_path)?,
            failures: if failures_path.exists() {
                read_jsonl(&failures_path)?
            } else {
                Vec::new()
            },
            resumed: 0,
        })
    }
}

fn cell_key(c: &CellResult) -> (String, String, String) {
    (c.model.clone(), c.condition.clone(), c.question_id.clone())
}

/// Append-only JSONL file shared by workers.
struct Journal {
    writer: Mutex<BufWriter<File>>,
    path: PathBuf,
}

impl Journal {
    fn open(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io(&path, e))?;
        Ok(Journal {
            writer: Mutex::new(BufWriter::new(file)),
            path,
        })
    }

    fn append<T: Serialize>(&self, items: &[T]) -> Result<()> {
        let mut w = self.writer.lock().expect("journal lock poisoned");
        for item in items {
            let line = serde_json::to_string(item).expect("journal records serialize");
            writeln!(w, "{line}").map_err(|e| io(&self.path, e))?;
        }
        w.flush().map_err(|e| io(&self.path, e))
    }
}

/// Reads a JSONL file, skipping a truncated final line.
/// Keys of cells with any generation call that took more than one attempt.
fn retried_cells(dir: &Path) -> Result<BTreeSet<(String, String, String)>> {
    let path = dir.join(GENERATIONS_FILE);
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let records: Vec<GenerationRecord> = read_jsonl(&path)?;
    Ok(records
        .into_iter()
        .filter(|r| r.attempts > 1)
        .map(|r| (r.model, r.question_id, r.condition))
        .collect())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| io(path, e))?;
    let last = lines.len().saturating_sub(1);
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i == last => log::warn!("{}: ignoring truncated final line", path.display()),
            Err(e) => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(|e| io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for item in items {
            let line = serde_json::to_string(item).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| io(&tmp, e))?;
        }
        w.flush().map_err(|e| io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

// ---------------------------------------------------------------------------
// Cell evaluation

struct CellJob<'a> {
    model: &'a ModelSpec,
    question: &'a Question,
    condition: &'a ConditionSpec,
    regime: Regime,
    k: u32,
}

enum CellError {
    Unevaluable(String),
    Failed(String),
    Fatal(Error),
}

fn classify(e: Error) -> CellError {
    match e {
        Error::Unevaluable { reason, .. } => CellError::Unevaluable(reason),
        e @ (Error::Prompt(_) | Error::NonPositiveBudget { .. }) => CellError::Unevaluable(e.to_string()),
        e @ Error::Authentication { .. } => CellError::Fatal(e),
        e => CellError::Failed(e.to_string()),
    }
}

struct Engine<'a> {
    ctx: &'a RunContext,
    generators: BTreeMap<String, Generator>,
    semaphores: BTreeMap<String, Semaphore>,
    verifier: Option<Box<dyn Verifier>>,
}

impl<'a> Engine<'a> {
    fn new(ctx: &'a RunContext, models: &[&ModelSpec]) -> Result<Self> {
        let policy = &ctx.config.retry;
        let mut generators = BTreeMap::new();
        let mut semaphores = BTreeMap::new();
        for m in models {
            generators.insert(m.name.clone(), Generator::for_model(m, policy)?);
            if !m.is_simulated() {
                semaphores
                    .entry(m.endpoint.clone())
                    .or_insert_with(|| Semaphore::new(ctx.config.endpoint_concurrency));
            }
        }
        let verifier = match &ctx.config.verifier {
            None => None,
            Some(v) => {
                let client = OpenAiClient::new(
                    &v.endpoint,
                    std::env::var(&v.api_key_env).ok(),
                    std::time::Duration::from_secs_f64(policy.timeout_seconds.max(0.001)),
                )?;
                Some(Box::new(ModelVerifier::new(Box::new(client), v.model.clone(), policy.clone())) as Box<dyn Verifier>)
            }
        };
        Ok(Engine {
            ctx,
            generators,
            semaphores,
            verifier,
        })
    }

    fn evaluate(&self, job: &CellJob<'_>) -> std::result::Result<(CellResult, Vec<GenerationRecord>), CellError> {
        let (model, q, cond) = (job.model, job.question, job.condition);
        let budget = cond
            .context_budget(model.max_context_tokens)
            .map_err(|e| CellError::Unevaluable(e.to_string()))?;
        let context = if cond.kind.requires_context_dir() {
            Some(load_fixed_context(q, cond, budget, &WhitespaceEstimator).map_err(classify)?)
        } else {
            None
        };
        let prompt = build_prompt_with(q, cond, context.as_deref(), &WhitespaceEstimator).map_err(classify)?;
        let params = select_decoding_params(job.regime, model.reasoning);
        let generator = &self.generators[&model.name];
        let request = CellRequest {
            seed: self.ctx.manifest.seed,
            model,
            question: q,
            condition: cond.label(),
            prompt: &prompt,
            params: &params,
            regime: job.regime,
        };
        let mut records = {
            let _permit = self.semaphores.get(&model.endpoint).map(Semaphore::acquire);
            generate_samples(generator, &request, job.k, &self.ctx.config.retry).map_err(classify)?
        };
        let verifier = self.verifier.as_deref();
        let ballots: Vec<Ballot> = records.iter_mut().map(|r| resolve_ballot(r, q, verifier)).collect();
        let latencies: Vec<f64> = records.iter().map(|r| r.latency_seconds).collect();
        let cell = CellResult::from_ballots(&model.name, &q.id, cond.label(), q.option_count(), &ballots, &latencies)
            .map_err(|e| CellError::Failed(e.to_string()))?;
        Ok((cell, records))
    }
}

/// Runs every (model, condition, question) job in `dir`, resuming from the
/// journals there, and leaves the journals sorted.
fn execute_grid(
    ctx: &RunContext,
    dir: &Path,
    models: &[&ModelSpec],
    conditions: &[&ConditionSpec],
    regime: Regime,
    k_for: impl Fn(&ModelSpec) -> u32,
) -> Result<GridStore> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let cells_path = dir.join(CELLS_FILE);
    let gens_path = dir.join(GENERATIONS_FILE);

    let mut jobs = Vec::new();
    for m in models {
        for c in conditions {
            for q in &ctx.benchmark.questions {
                jobs.push(CellJob {
                    model: m,
                    question: q,
                    condition: c,
                    regime,
                    k: k_for(m),
                });
            }
        }
    }
    let job_keys: BTreeSet<(String, String, String)> = jobs
        .iter()
        .map(|j| (j.model.name.clone(), j.condition.label().to_string(), j.question.id.clone()))
        .collect();

    let mut done: BTreeMap<(String, String, String), CellResult> = BTreeMap::new();
    if cells_path.exists() {
        for c in read_jsonl::<CellResult>(&cells_path)? {
            let key = cell_key(&c);
            if job_keys.contains(&key) {
                done.insert(key, c);
            }
        }
    }
    let resumed = done.len();
    let pending: Vec<&CellJob<'_>> = jobs
        .iter()
        .filter(|j| !done.contains_key(&(j.model.name.clone(), j.condition.label().to_string(), j.question.id.clone())))
        .collect();
    log::info!(
        "{}: {} cells, {} resumed, {} pending",
        dir.display(),
        jobs.len(),
        resumed,
        pending.len()
    );

    let engine = Engine::new(ctx, models)?;
    let cell_journal = Journal::open(cells_path.clone())?;
    let gen_journal = Journal::open(gens_path.clone())?;
    let fresh: Mutex<Vec<CellResult>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<CellFailure>> = Mutex::new(Vec::new());
    let fatal: Mutex<Option<Error>> = Mutex::new(None);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().for_each(|job| {
            if fatal.lock().expect("lock").is_some() {
                return;
            }
            let failure = |kind, reason: String| CellFailure {
                model: job.model.name.clone(),
                question_id: job.question.id.clone(),
                condition: job.condition.label().to_string(),
                kind,
                reason,
            };
            match engine.evaluate(job) {
                Ok((cell, records)) => {
                    let written = gen_journal.append(&records).and_then(|_| cell_journal.append(std::slice::from_ref(&cell)));
                    match written {
                        Ok(()) => fresh.lock().expect("lock").push(cell),
                        Err(e) => *fatal.lock().expect("lock") = Some(e),
                    }
                }
                Err(CellError::Unevaluable(r)) => failures.lock().expect("lock").push(failure(FailureKind::Unevaluable, r)),
                Err(CellError::Failed(r)) => {
                    log::warn!("cell ({}, {}, {}) failed: {r}", job.model.name, job.question.id, job.condition.label());
                    failures.lock().expect("lock").push(failure(FailureKind::Failed, r))
                }
                Err(CellError::Fatal(e)) => *fatal.lock().expect("lock") = Some(e),
            }
        })
    });
    if let Some(e) = fatal.into_inner().expect("lock") {
        return Err(e);
    }
    drop(cell_journal);
    drop(gen_journal);

    for c in fresh.into_inner().expect("lock") {
        done.insert(cell_key(&c), c);
    }
    let cells: Vec<CellResult> = done.into_values().collect();
    let mut failures = failures.into_inner().expect("lock");
    failures.sort();

    // Keep generations of completed cells only, one record per rep.
    let completed: BTreeSet<(String, String, String)> = cells.iter().map(cell_key).collect();
    let mut gens: BTreeMap<(String, String, String, u32), GenerationRecord> = BTreeMap::new();
    for g in read_jsonl::<GenerationRecord>(&gens_path)? {
        let key = (g.model.clone(), g.condition.clone(), g.question_id.clone());
        if completed.contains(&key) {
            gens.insert((key.0, key.1, key.2, g.rep_index), g);
        }
    }
    let gens: Vec<GenerationRecord> = gens.into_values().collect();
    write_jsonl(&cells_path, &cells)?;
    write_jsonl(&gens_path, &gens)?;
    write_jsonl(&dir.join(FAILURES_FILE), &failures)?;

    let store = GridStore {
        cells,
        failures,
        resumed,
    };
    let completeness = store.completeness(jobs.len());
    if !completeness.is_exact() {
        return Err(Error::Mismatch(format!("cell store incomplete: {completeness:?}")));
    }
    write_json(&dir.join("completeness.json"), &completeness)?;
    Ok(store)
}

/// Runs the main grid: every model under every condition with `k_m`
/// stochastic samples per cell.
pub fn run_main_grid(ctx: &RunContext) -> Result<GridStore> {
    let models: Vec<&ModelSpec> = ctx.config.models.iter().collect();
    let conditions: Vec<&ConditionSpec> = ctx.conditions.iter().collect();
    execute_grid(
        ctx,
        &ctx.run_dir.join(MAIN_GRID_DIR),
        &models,
        &conditions,
        Regime::Stochastic,
        |m| m.repetitions,
    )
}

pub fn load_main_grid(ctx: &RunContext) -> Result<GridStore> {
    GridStore::load(&ctx.run_dir.join(MAIN_GRID_DIR))
}

// ---------------------------------------------------------------------------
// Scoring and analysis

pub fn score_grid(ctx: &RunContext, store: &GridStore) -> Result<Vec<ScoredCell>> {
    store
        .cells
        .iter()
        .map(|c| ScoredCell::from_cell(c, ctx.question(&c.question_id)?, ctx.manifest.theta))
        .collect()
}

fn group_by_pair(scored: &[ScoredCell]) -> BTreeMap<(&str, &str), Vec<&ScoredCell>> {
    let mut out: BTreeMap<(&str, &str), Vec<&ScoredCell>> = BTreeMap::new();
    for c in scored {
        out.entry((c.model.as_str(), c.condition.as_str())).or_default().push(c);
    }
    out
}

/// Per model-condition rows followed by model-averaged rows.
pub fn metrics_table(scored: &[ScoredCell]) -> Vec<MetricsRow> {
    let rows: Vec<MetricsRow> = group_by_pair(scored)
        .iter()
        .map(|((m, c), cells)| MetricsRow::from_cells(m, c, cells))
        .collect();
    let averaged = model_average(&rows);
    rows.into_iter().chain(averaged).collect()
}

/// Per-question 0/100 vectors in benchmark order for pairs that cover
/// every question.
fn per_question_vectors(benchmark: &Benchmark, scored: &[ScoredCell], metric: Metric) -> PerQuestionValues {
    let mut out = PerQuestionValues::new();
    for ((model, cond), cells) in group_by_pair(scored) {
        let by_q: BTreeMap<&str, &ScoredCell> = cells.iter().map(|c| (c.question_id.as_str(), *c)).collect();
        let values: Option<Vec<f64>> = benchmark
            .questions
            .iter()
            .map(|q| by_q.get(q.id.as_str()).and_then(|c| metric.binary_value(&c.outcome)))
            .collect();
        if let Some(v) = values {
            out.entry(model.to_string()).or_default().insert(cond.to_string(), v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub metric: Metric,
    pub model: String,
    pub condition: String,
    #[serde(flatten)]
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCi {
    pub metric: Metric,
    pub model: String,
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub metric: Metric,
    pub models: usize,
    pub conditions: Vec<String>,
    #[serde(flatten)]
    pub components: Option<VarianceComponents>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub condition: String,
    pub theta: f64,
    pub available_cells: usize,
    pub danger_oc: f64,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub metrics: Vec<MetricsRow>,
    pub plan: BootstrapPlan,
    pub cis: Vec<MetricCi>,
    pub deltas: Vec<DeltaRow>,
    pub delta_cis: Vec<DeltaCi>,
    pub variance: Vec<VarianceRow>,
    pub worst_cases: BTreeMap<String, Vec<WorstCaseRow>>,
    pub cross_condition: Vec<CrossConditionRow>,
    pub sweep: Vec<SweepRow>,
    pub strata: Vec<StratumRow>,
    pub latency: Vec<LatencyRow>,
}

fn is_extended(kind: ConditionKind) -> bool {
    matches!(kind, ConditionKind::Context32k | ConditionKind::Context100k)
}

pub fn analyze(ctx: &RunContext, scored: &[ScoredCell]) -> Result<Analysis> {
    let metrics = metrics_table(scored);
    let plan = BootstrapPlan::new(ctx.manifest.seed, ctx.manifest.bootstrap_replicates, ctx.benchmark.len())?;
    let labels = ctx.condition_labels();

    let mut cis = Vec::new();
    let mut vectors = BTreeMap::new();
    for metric in BINARY_METRICS {
        let values = per_question_vectors(&ctx.benchmark, scored, metric);
        for row in bootstrap_ci(&values, &plan)? {
            cis.push(MetricCi {
                metric,
                model: row.model,
                condition: row.condition,
                interval: row.interval,
            });
        }
        vectors.insert(metric, values);
    }

    let per_model: Vec<&MetricsRow> = metrics.iter().filter(|r| r.model != MODEL_AVERAGE).collect();
    let index: BTreeMap<(&str, &str), &MetricsRow> =
        per_model.iter().map(|r| ((r.model.as_str(), r.condition.as_str()), *r)).collect();
    let pairs: Vec<(&str, &str)> = DEFAULT_DELTA_PAIRS
        .iter()
        .copied()
        .filter(|(a, b)| labels.iter().any(|l| l == a) && labels.iter().any(|l| l == b))
        .collect();
    let mut deltas = Vec::new();
    let mut delta_cis = Vec::new();
    for (from, to) in &pairs {
        let models: Vec<&str> = ctx
            .config
            .models
            .iter()
            .map(|m| m.name.as_str())
            .filter(|m| index.contains_key(&(*m, *from)) && index.contains_key(&(*m, *to)))
            .collect();
        if models.is_empty() {
            continue;
        }
        let mut from_rows = Vec::new();
        let mut to_rows = Vec::new();
        for m in &models {
            let (a, b) = (index[&(*m, *from)], index[&(*m, *to)]);
            deltas.push(delta_row(a, b));
            from_rows.push(a.clone());
            to_rows.push(b.clone());
        }
        let avg_from = &model_average(&from_rows)[0];
        let avg_to = &model_average(&to_rows)[0];
        deltas.push(delta_row(avg_from, avg_to));

        for metric in BINARY_METRICS {
            let values = &vectors[&metric];
            let mut complete = Vec::new();
            for m in &models {
                let conds = values.get(*m);
                if let (Some(a), Some(b)) = (conds.and_then(|c| c.get(*from)), conds.and_then(|c| c.get(*to))) {
                    delta_cis.push(DeltaCi {
                        metric,
                        model: m.to_string(),
                        from: from.to_string(),
                        to: to.to_string(),
                        interval: plan.delta_ci(a, b)?,
                    });
                    complete.push((a.as_slice(), b.as_slice()));
                }
            }
            if !complete.is_empty() {
                delta_cis.push(DeltaCi {
                    metric,
                    model: MODEL_AVERAGE.to_string(),
                    from: from.to_string(),
                    to: to.to_string(),
                    interval: plan.averaged_delta_ci(&complete)?,
                });
            }
        }
    }

    let base_conditions: Vec<String> = ctx
        .conditions
        .iter()
        .filter(|c| !is_extended(c.kind))
        .map(|c| c.label().to_string())
        .collect();
    let families: BTreeMap<String, String> =
        ctx.config.models.iter().map(|m| (m.name.clone(), m.family.clone())).collect();
    let complete_models: Vec<&str> = ctx
        .config
        .models
        .iter()
        .map(|m| m.name.as_str())
        .filter(|m| base_conditions.iter().all(|c| index.contains_key(&(*m, c.as_str()))))
        .collect();
    let variance = [Metric::Accuracy, Metric::HighRisk, Metric::Unsafe, Metric::Contradiction, Metric::DangerOc]
        .into_iter()
        .map(|metric| {
            let mut grid = BTreeMap::new();
            for m in &complete_models {
                for c in &base_conditions {
                    if let Some(v) = index[&(*m, c.as_str())].metric(metric) {
                        grid.insert((m.to_string(), c.clone()), v);
                    }
                }
            }
            let result = variance_decomposition(&grid, &families);
            VarianceRow {
                metric,
                models: complete_models.len(),
                conditions: base_conditions.clone(),
                error: result.as_ref().err().map(|e| e.to_string()),
                components: result.ok(),
            }
        })
        .collect();

    let mut by_condition: BTreeMap<&str, Vec<&ScoredCell>> = BTreeMap::new();
    for c in scored {
        by_condition.entry(c.condition.as_str()).or_default().push(c);
    }
    let worst_cases: BTreeMap<String, Vec<WorstCaseRow>> = by_condition
        .iter()
        .map(|(c, cells)| (c.to_string(), crate::stats::worst_case_ranking(&ctx.benchmark, cells)))
        .collect();
    let base_worst: BTreeMap<String, Vec<WorstCaseRow>> = worst_cases
        .iter()
        .filter(|(c, _)| base_conditions.contains(c))
        .map(|(c, rows)| (c.clone(), rows.clone()))
        .collect();
    let cross_condition = cross_condition_ranking(&base_worst);

    let mut sweep = Vec::new();
    for label in &labels {
        let cells = by_condition.get(label.as_str()).cloned().unwrap_or_default();
        for (theta, rate) in threshold_sweep(&cells, &ctx.manifest.sweep_thetas) {
            sweep.push(SweepRow {
                condition: label.clone(),
                theta,
                available_cells: cells.len(),
                danger_oc: rate,
            });
        }
    }

    let all: Vec<&ScoredCell> = scored.iter().collect();
    let buckets = ctx.size_buckets();
    let strata = StratumKind::ALL
        .iter()
        .flat_map(|k| stratified_report(&ctx.benchmark, &all, *k, &buckets))
        .collect();
    let latency = latency_summary(&all, &buckets, &retried_cells(&ctx.run_dir.join(MAIN_GRID_DIR))?);

    Ok(Analysis {
        metrics,
        plan,
        cis,
        deltas,
        delta_cis,
        variance,
        worst_cases,
        cross_condition,
        sweep,
        strata,
        latency,
    })
}

// ---------------------------------------------------------------------------
// Self-consistency

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScRow {
    pub regime: String,
    #[serde(flatten)]
    pub metrics: MetricsRow,
    pub robustness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScDelta {
    pub model: String,
    pub condition: String,
    pub accuracy: f64,
    pub high_risk: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_: f64,
    pub contradiction: f64,
    pub mean_latency_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ScReport {
    pub rows: Vec<ScRow>,
    pub deltas: Vec<ScDelta>,
    pub single: GridStore,
    pub sampled: GridStore,
}

pub const SINGLE_REGIME: &str = "single";
pub const SC_REGIME: &str = "self_consistency";

/// Single greedy outputs: no confidence and therefore no dangerous
/// overconfidence.
pub fn score_single(ctx: &RunContext, store: &GridStore) -> Result<Vec<ScoredCell>> {
    store
        .cells
        .iter()
        .map(|c| {
            let q = ctx.question(&c.question_id)?;
            Ok(ScoredCell {
                model: c.model.clone(),
                question_id: c.question_id.clone(),
                condition: c.condition.clone(),
                final_option: c.final_option,
                confidence: None,
                robustness: None,
                latency_seconds: c.latency.mean_seconds,
                outcome: score_final(c.final_option, None, q, ctx.manifest.theta, ThresholdRule::Inclusive)?,
            })
        })
        .collect()
}

/// Sampled outputs with confidence and robustness correctness.
pub fn score_sampled(ctx: &RunContext, store: &GridStore) -> Result<Vec<ScoredCell>> {
    store
        .cells
        .iter()
        .map(|c| {
            let q = ctx.question(&c.question_id)?;
            let mut s = ScoredCell::from_cell(c, q, ctx.manifest.theta)?;
            let total = c.ballot_counts.total();
            s.robustness = (total > 0)
                .then(|| c.ballot_counts.get(Ballot::Valid(q.correct_letter())) as f64 / total as f64);
            Ok(s)
        })
        .collect()
}

fn sc_rows(regime: &str, scored: &[ScoredCell]) -> Vec<ScRow> {
    let mut rows: Vec<ScRow> = group_by_pair(scored)
        .iter()
        .map(|((m, c), cells)| {
            let rob: Vec<f64> = cells.iter().filter_map(|c| c.robustness).collect();
            ScRow {
                regime: regime.to_string(),
                metrics: MetricsRow::from_cells(m, c, cells),
                robustness: crate::stats::mean(&rob),
            }
        })
        .collect();
    let metrics: Vec<MetricsRow> = rows.iter().map(|r| r.metrics.clone()).collect();
    for avg in model_average(&metrics) {
        let rob: Vec<f64> = rows
            .iter()
            .filter(|r| r.metrics.condition == avg.condition)
            .filter_map(|r| r.robustness)
            .collect();
        rows.push(ScRow {
            regime: regime.to_string(),
            metrics: avg,
            robustness: crate::stats::mean(&rob),
        });
    }
    rows
}

pub fn self_consistency_report(ctx: &RunContext, single: GridStore, sampled: GridStore) -> Result<ScReport> {
    let single_rows = sc_rows(SINGLE_REGIME, &score_single(ctx, &single)?);
    let sampled_rows = sc_rows(SC_REGIME, &score_sampled(ctx, &sampled)?);
    let lookup: BTreeMap<(&str, &str), &ScRow> = sampled_rows
        .iter()
        .map(|r| ((r.metrics.model.as_str(), r.metrics.condition.as_str()), r))
        .collect();
    let deltas = single_rows
        .iter()
        .filter_map(|s| {
            let b = &lookup.get(&(s.metrics.model.as_str(), s.metrics.condition.as_str()))?.metrics;
            let a = &s.metrics;
            Some(ScDelta {
                model: a.model.clone(),
                condition: a.condition.clone(),
                accuracy: b.accuracy - a.accuracy,
                high_risk: b.high_risk - a.high_risk,
                unsafe_: b.unsafe_ - a.unsafe_,
                contradiction: b.contradiction - a.contradiction,
                mean_latency_seconds: b.mean_latency_seconds - a.mean_latency_seconds,
            })
        })
        .collect();
    Ok(ScReport {
        rows: single_rows.into_iter().chain(sampled_rows).collect(),
        deltas,
        single,
        sampled,
    })
}

/// Runs the Single (one greedy output) and self-consistency (`k`
/// stochastic samples) regimes for the configured models and conditions.
pub fn run_self_consistency(ctx: &RunContext) -> Result<ScReport> {
    let spec = ctx
        .config
        .self_consistency
        .as_ref()
        .ok_or_else(|| Error::Config("no self_consistency section in the config".into()))?;
    let (models, conditions) = sc_scope(ctx)?;
    let single = execute_grid(ctx, &ctx.run_dir.join(SC_SINGLE_DIR), &models, &conditions, Regime::Greedy, |_| 1)?;
    let k = spec.k;
    let sampled = execute_grid(ctx, &ctx.run_dir.join(SC_SAMPLED_DIR), &models, &conditions, Regime::Stochastic, |_| k)?;
    self_consistency_report(ctx, single, sampled)
}

pub fn load_self_consistency(ctx: &RunContext) -> Result<ScReport> {
    let single = GridStore::load(&ctx.run_dir.join(SC_SINGLE_DIR))?;
    let sampled = GridStore::load(&ctx.run_dir.join(SC_SAMPLED_DIR))?;
    self_consistency_report(ctx, single, sampled)
}

fn sc_scope(ctx: &RunContext) -> Result<(Vec<&ModelSpec>, Vec<&ConditionSpec>)> {
    let spec = ctx.config.self_consistency.as_ref().expect("checked by caller");
    let models = spec
        .models
        .iter()
        .map(|m| ctx.config.model(m).ok_or_else(|| Error::Config(format!("unknown model {m}"))))
        .collect::<Result<_>>()?;
    let conditions = spec
        .conditions
        .iter()
        .map(|c| ctx.condition(c).ok_or_else(|| Error::Config(format!("unknown condition {c}"))))
        .collect::<Result<_>>()?;
    Ok((models, conditions))
}

// ---------------------------------------------------------------------------
// Ensembles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEnsemble {
    pub ensemble: String,
    pub condition: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleReport {
    pub rows: Vec<EnsembleRow>,
    pub deltas: Vec<BestMemberDelta>,
    pub cells: Vec<EnsembleCell>,
    pub skipped: Vec<SkippedEnsemble>,
}

/// Evaluates every configured ensemble (and ablation variant) under every
/// condition from stored main-grid cells.
pub fn run_ensembles(ctx: &RunContext, scored: &[ScoredCell], metrics: &[MetricsRow]) -> Result<EnsembleReport> {
    let index = index_cells(scored);
    let mut report = EnsembleReport::default();
    for spec in ctx.config.expanded_ensembles()? {
        for label in ctx.condition_labels() {
            match evaluate_ensemble(&spec, &ctx.benchmark, &index, &label, ctx.manifest.theta) {
                Ok(cells) => {
                    let row = EnsembleRow::from_cells(&spec, &label, &cells);
                    let member_rows: Vec<&MetricsRow> = spec
                        .members
                        .iter()
                        .filter_map(|m| metrics.iter().find(|r| r.model == *m && r.condition == label))
                        .collect();
                    report.deltas.extend(best_member_deltas(&row, &member_rows)?);
                    report.rows.push(row);
                    report.cells.extend(cells);
                }
                Err(e @ Error::Missing(_)) => report.skipped.push(SkippedEnsemble {
                    ensemble: spec.name.clone(),
                    condition: label.clone(),
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Reports

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn flatten_value(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_value(&key, child, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Array(items) if items.iter().all(|i| i.is_string()) => out.push((
            prefix.to_string(),
            items.iter().filter_map(Value::as_str).collect::<Vec<_>>().join(";"),
        )),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Writes rows as CSV; nested fields become dotted columns and the header
/// is the union of columns in first-seen order.
fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    let flat: Vec<Vec<(String, String)>> = rows
        .iter()
        .map(|r| {
            let mut out = Vec::new();
            flatten_value("", &serde_json::to_value(r).expect("rows serialize"), &mut out);
            out
        })
        .collect();
    let mut header: Vec<String> = Vec::new();
    for row in &flat {
        for (k, _) in row {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for row in &flat {
        let lookup: BTreeMap<&str, &str> = row.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        w.write_record(header.iter().map(|h| lookup.get(h.as_str()).copied().unwrap_or("")))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io(path, e))
}

fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    write_csv(&dir.join(format!("{stem}.csv")), rows)?;
    write_json(&dir.join(format!("{stem}.json")), rows)
}

#[derive(Serialize)]
struct LongRow<'a> {
    model: &'a str,
    condition: &'a str,
    metric: &'static str,
    value: f64,
}

#[derive(Serialize)]
struct QuestionRiskRow<'a> {
    condition: &'a str,
    question_id: &'a str,
    n_models: usize,
    wrong_rate: f64,
    high_risk_rate: f64,
    unsafe_rate: f64,
    contradiction_rate: f64,
}

/// Writes the main-grid tables under `<run>/reports/`.
pub fn emit_main_reports(ctx: &RunContext, store: &GridStore, scored: &[ScoredCell], a: &Analysis) -> Result<()> {
    let dir = ctx.run_dir.join("reports");
    write_table(&dir, "outcomes", scored)?;
    write_table(&dir, "metrics", &a.metrics)?;
    write_table(&dir, "failures", &store.failures)?;
    write_json(
        &dir.join("completeness.json"),
        &store.completeness(ctx.config.models.len() * ctx.conditions.len() * ctx.benchmark.len()),
    )?;
    write_table(&dir, "bootstrap_ci", &a.cis)?;
    write_json(&dir.join("bootstrap_indices.json"), &a.plan)?;
    write_table(&dir, "deltas", &a.deltas)?;
    write_table(&dir, "delta_ci", &a.delta_cis)?;
    write_table(&dir, "variance_decomposition", &a.variance)?;
    for (cond, rows) in &a.worst_cases {
        write_table(&dir.join("worst_cases"), cond, rows)?;
    }
    write_table(&dir, "worst_cases_cross_condition", &a.cross_condition)?;
    write_table(&dir, "threshold_sweep", &a.sweep)?;
    for kind in StratumKind::ALL {
        let rows: Vec<&StratumRow> = a.strata.iter().filter(|r| r.kind == kind).collect();
        write_table(&dir, &format!("strata_{}", kind.as_str()), &rows)?;
    }
    write_table(&dir, "latency_by_bucket", &a.latency)?;

    // Long-format tables for plotting.
    let long = |avg: bool| -> Vec<LongRow<'_>> {
        a.metrics
            .iter()
            .filter(|r| (r.model == MODEL_AVERAGE) == avg)
            .flat_map(|r| {
                Metric::ALL.iter().filter_map(move |m| {
                    Some(LongRow {
                        model: &r.model,
                        condition: &r.condition,
                        metric: m.as_str(),
                        value: r.metric(*m)?,
                    })
                })
            })
            .collect()
    };
    write_csv(&dir.join("plots/condition_centroids.csv"), &long(true))?;
    write_csv(&dir.join("plots/model_scatter.csv"), &long(false))?;
    let risk: Vec<QuestionRiskRow<'_>> = a
        .worst_cases
        .iter()
        .flat_map(|(cond, rows)| {
            let mut rows: Vec<&WorstCaseRow> = rows.iter().collect();
            rows.sort_by(|x, y| x.question_id.cmp(&y.question_id));
            rows.into_iter().map(move |r| QuestionRiskRow {
                condition: cond,
                question_id: &r.question_id,
                n_models: r.n_models,
                wrong_rate: r.wrong_rate,
                high_risk_rate: r.high_risk_rate,
                unsafe_rate: r.unsafe_rate,
                contradiction_rate: r.contradiction_rate,
            })
        })
        .collect();
    write_csv(&dir.join("plots/question_risk.csv"), &risk)?;
    write_csv(&dir.join("plots/threshold_sweep.csv"), &a.sweep)?;
    Ok(())
}

pub fn emit_sc_reports(ctx: &RunContext, sc: &ScReport) -> Result<()> {
    let dir = ctx.run_dir.join("reports/self_consistency");
    write_table(&dir, "metrics", &sc.rows)?;
    write_table(&dir, "deltas", &sc.deltas)?;
    let expected = |s: &GridStore| s.completeness(s.cells.len() + s.failures.len());
    write_json(
        &dir.join("completeness.json"),
        &BTreeMap::from([(SINGLE_REGIME, expected(&sc.single)), (SC_REGIME, expected(&sc.sampled))]),
    )
}

pub fn emit_ensemble_reports(ctx: &RunContext, e: &EnsembleReport) -> Result<()> {
    let dir = ctx.run_dir.join("reports/ensembles");
    write_table(&dir, "ensembles", &e.rows)?;
    write_table(&dir, "best_member_deltas", &e.deltas)?;
    write_csv(&dir.join("ensemble_cells.csv"), &e.cells)?;
    write_table(&dir, "skipped", &e.skipped)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

/// Hashes every file in the run directory except the index and run log.
pub fn write_index(ctx: &RunContext) -> Result<Vec<IndexEntry>> {
    let mut files = Vec::new();
    collect_files(&ctx.run_dir, &ctx.run_dir, &mut files)?;
    let mut entries: Vec<IndexEntry> = files
        .into_iter()
        .filter(|p| p != Path::new(INDEX_FILE) && p != Path::new(RUN_LOG_FILE))
        .map(|rel| {
            let full = ctx.run_dir.join(&rel);
            let bytes = fs::read(&full).map_err(|e| io(&full, e))?;
            Ok(IndexEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    write_json(&ctx.run_dir.join(INDEX_FILE), &entries)?;
    Ok(entries)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogEntry {
    command: String,
    started_unix: f64,
    finished_unix: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Appends a timing entry to the run log, which is excluded from the index.
fn log_command(ctx: &RunContext, command: &str, started_unix: f64) -> Result<()> {
    let path = ctx.run_dir.join(RUN_LOG_FILE);
    let mut entries: Vec<LogEntry> = if path.exists() { read_json(&path)? } else { Vec::new() };
    entries.push(LogEntry {
        command: command.to_string(),
        started_unix,
        finished_unix: unix_now(),
    });
    write_json(&path, &entries)
}

// ---------------------------------------------------------------------------
// Commands

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub completeness: Option<Completeness>,
    /// Cells taken from an earlier, interrupted run.
    pub resumed: usize,
    pub metrics: Vec<MetricsRow>,
    pub sc_rows: Vec<ScRow>,
    pub ensemble_rows: Vec<EnsembleRow>,
    pub index: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Main grid inference, then every configured analysis.
    Run,
    /// Rescore stored main-grid cells.
    Score,
    /// Rescore and run the statistics.
    Analyze,
    /// Ensembles from stored cells.
    Ensembles,
    /// Self-consistency inference and comparison.
    SelfConsistency,
    /// Regenerate every report from stored cells.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Score => "score",
            Command::Analyze => "analyze",
            Command::Ensembles => "ensembles",
            Command::SelfConsistency => "sc",
            Command::Report => "report",
        }
    }
}

pub fn execute(ctx: &RunContext, command: Command) -> Result<RunSummary> {
    let started = unix_now();
    let mut summary = RunSummary {
        run_dir: ctx.run_dir.clone(),
        ..RunSummary::default()
    };
    let expected = ctx.config.models.len() * ctx.conditions.len() * ctx.benchmark.len();

    if command == Command::SelfConsistency {
        let sc = run_self_consistency(ctx)?;
        emit_sc_reports(ctx, &sc)?;
        summary.sc_rows = sc.rows;
    } else {
        let store = match command {
            Command::Run => run_main_grid(ctx)?,
            _ => load_main_grid(ctx)?,
        };
        summary.completeness = Some(store.completeness(expected));
        summary.resumed = store.resumed;
        let scored = score_grid(ctx, &store)?;
        let metrics = metrics_table(&scored);
        match command {
            Command::Score => {
                let dir = ctx.run_dir.join("reports");
                write_table(&dir, "outcomes", &scored)?;
                write_table(&dir, "metrics", &metrics)?;
            }
            Command::Ensembles => {
                if ctx.config.expanded_ensembles()?.is_empty() {
                    return Err(Error::Config("no ensembles configured".into()));
                }
                let e = run_ensembles(ctx, &scored, &metrics)?;
                emit_ensemble_reports(ctx, &e)?;
                summary.ensemble_rows = e.rows;
            }
            _ => {
                let analysis = analyze(ctx, &scored)?;
                emit_main_reports(ctx, &store, &scored, &analysis)?;
                if matches!(command, Command::Run | Command::Report) {
                    if !ctx.config.expanded_ensembles()?.is_empty() {
                        let e = run_ensembles(ctx, &scored, &metrics)?;
                        emit_ensemble_reports(ctx, &e)?;
                        summary.ensemble_rows = e.rows;
                    }
                    if ctx.config.self_consistency.is_some() {
                        let sc = if command == Command::Run {
                            run_self_consistency(ctx)?
                        } else {
                            load_self_consistency(ctx)?
                        };
                        emit_sc_reports(ctx, &sc)?;
                        summary.sc_rows = sc.rows;
                    }
                }
            }
        }
        summary.metrics = metrics;
    }
    summary.index = write_index(ctx)?;
    log_command(ctx, command.name(), started)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::fixtures::{benchmark, question};
    use crate::gateway::{BallotSpec, SimulationProfile, WrongSplit};

    fn setup(dir: &Path, n: usize, conditions: &str) -> RunConfig {
        let qs: Vec<Question> = (0..n).map(|i| question(&format!("Q{i:02}"), 4, i % 4)).collect();
        benchmark(qs).save(&dir.join("bench.json")).unwrap();
        let mut cfg = RunConfig::from_toml(
            &format!("seed = 5\nbenchmark = \"bench.json\"\nbootstrap_replicates = 50\nworkers = 3\n{conditions}"),
            dir,
        )
        .unwrap();
        let profile = SimulationProfile::uniform(BallotSpec::Relative {
            correct: 0.7,
            null: 0.1,
            wrong: WrongSplit::Uniform,
        });
        cfg.models.push(ModelSpec::simulated("m1", "fa", 7.0, profile.clone()));
        let mut m2 = ModelSpec::simulated("m2", "fb", 70.0, profile);
        m2.repetitions = 3;
        cfg.models.push(m2);
        cfg
    }

    const TWO: &str = "[[conditions]]\nkind = \"closed_book\"\n[[conditions]]\nkind = \"clean_evidence\"\n";

    #[test]
    fn grid_counts_cells_and_respects_k() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path(), 10, TWO);
        let ctx = RunContext::prepare(cfg, &tmp.path().join("out")).unwrap();
        let store = run_main_grid(&ctx).unwrap();
        assert_eq!(store.cells.len(), 40);
        assert!(store.cells.iter().filter(|c| c.model == "m2").all(|c| c.k_used == 3));
        assert!(store.cells.iter().filter(|c| c.model == "m1").all(|c| c.k_used == 20));
        let scored = score_grid(&ctx, &store).unwrap();
        let table = metrics_table(&scored);
        assert_eq!(table.iter().filter(|r| r.model != MODEL_AVERAGE).count(), 4);
    }

    #[test]
    fn resume_skips_stored_cells_and_matches_fresh_run() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path(), 6, TWO);
        let ctx = RunContext::prepare(cfg.clone(), &tmp.path().join("a")).unwrap();
        let full = run_main_grid(&ctx).unwrap();

        let ctx_b = RunContext::prepare(cfg, &tmp.path().join("b")).unwrap();
        let grid = ctx_b.run_dir.join(MAIN_GRID_DIR);
        fs::create_dir_all(&grid).unwrap();
        let partial: Vec<String> = fs::read_to_string(ctx.run_dir.join(MAIN_GRID_DIR).join(CELLS_FILE))
            .unwrap()
            .lines()
            .take(5)
            .map(String::from)
            .collect();
        fs::write(grid.join(CELLS_FILE), partial.join("\n") + "\n{\"trunc").unwrap();
        let resumed = run_main_grid(&ctx_b).unwrap();
        assert_eq!(resumed.resumed, 5);
        assert_eq!(resumed.cells, full.cells);
    }

    #[test]
    fn different_manifest_in_same_dir_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = setup(tmp.path(), 4, TWO);
        cfg.run_id = Some("fixed".into());
        RunContext::prepare(cfg.clone(), &tmp.path().join("out")).unwrap();
        cfg.seed = 6;
        assert!(RunContext::prepare(cfg, &tmp.path().join("out")).is_err());
    }

    #[test]
    fn unevaluable_cells_are_counted() {
        let tmp = tempfile::tempdir().unwrap();
        let ctxdir = tmp.path().join("ctx");
        fs::create_dir_all(&ctxdir).unwrap();
        fs::write(ctxdir.join("Q00.txt"), "some long context").unwrap();
        let conds = "[[conditions]]\nkind = \"closed_book\"\n[[conditions]]\nkind = \"context_100k\"\ncontext_dir = \"ctx\"\n";
        let mut cfg = setup(tmp.path(), 3, conds);
        cfg.models[1].max_context_tokens = 32_768;
        let ctx = RunContext::prepare(cfg, &tmp.path().join("out")).unwrap();
        let store = run_main_grid(&ctx).unwrap();
        let c = store.completeness(12);
        assert!(c.is_exact());
        // m2 cannot host 100k; m1 lacks context files for Q01 and Q02.
        assert_eq!((c.completed, c.unevaluable, c.failed), (7, 5, 0));
    }

    #[test]
    fn csv_flattens_nested_fields() {
        let tmp = tempfile::tempdir().unwrap();
        #[derive(Serialize)]
        struct Row {
            a: u32,
            inner: Inner,
            tags: Vec<String>,
            maybe: Option<f64>,
        }
        #[derive(Serialize)]
        struct Inner {
            b: bool,
        }
        let path = tmp.path().join("t.csv");
        write_csv(
            &path,
            &[Row { a: 1, inner: Inner { b: true }, tags: vec!["x".into(), "y".into()], maybe: None }],
        )
        .unwrap();
        assert_eq!(fs::read_to_string(path).unwrap(), "a,inner.b,tags,maybe\n1,true,x;y,\n");
    }
}
