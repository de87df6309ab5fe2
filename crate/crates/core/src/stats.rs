//! Bootstrap intervals with shared resampling indices, paired condition
//! deltas, two-way variance decomposition, worst-case rankings, strata and
//! latency summaries.
//!
//! Percentiles use linear interpolation between order statistics and every
//! standard deviation is the population form (divisor `n`).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ballot::Letter;
use crate::benchmark::{Benchmark, Question};
use crate::error::{Error, Result};
use crate::gateway::SizeBucket;
use crate::scoring::{MetricsRow, ScoredCell};

/// Label used for rows averaged over models.
pub const MODEL_AVERAGE: &str = "model_average";

/// Percentile `p` (0..=100) with linear interpolation; `None` when empty.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * (p / 100.0).clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    fn from_replicates(estimate: f64, reps: &[f64]) -> Self {
        Interval {
            estimate,
            sd: std_dev(reps).unwrap_or(0.0),
            lower: percentile(reps, 2.5).unwrap_or(estimate),
            upper: percentile(reps, 97.5).unwrap_or(estimate),
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// One with-replacement index list per replicate, drawn once and shared by
/// every model and condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub seed: u64,
    pub n: usize,
    pub indices: Vec<Vec<u32>>,
}

impl BootstrapPlan {
    /// Replicate `r` draws from a ChaCha20 stream `r` keyed by `seed`, so the
    /// plan does not depend on how replicates are scheduled.
    pub fn new(seed: u64, replicates: usize, n: usize) -> Result<Self> {
        if replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        if n == 0 {
            return Err(Error::Config("bootstrap needs at least one question".into()));
        }
        let indices = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                (0..n).map(|_| rng.gen_range(0..n) as u32).collect()
            })
            .collect();
        Ok(BootstrapPlan { seed, n, indices })
    }

    pub fn replicates(&self) -> usize {
        self.indices.len()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::Mismatch(format!(
                "bootstrap vector has length {}, expected {}",
                v.len(),
                self.n
            )));
        }
        Ok(())
    }

    fn resampled_mean(&self, r: usize, v: &[f64]) -> f64 {
        self.indices[r].iter().map(|&i| v[i as usize]).sum::<f64>() / self.n as f64
    }

    /// Mean of `v` in every replicate.
    pub fn replicate_means(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok((0..self.replicates())
            .into_par_iter()
            .map(|r| self.resampled_mean(r, v))
            .collect())
    }

    /// Per replicate: each vector's mean, then the average over vectors.
    pub fn averaged_replicates(&self, vs: &[&[f64]]) -> Result<Vec<f64>> {
        if vs.is_empty() {
            return Err(Error::Missing("no vectors to average".into()));
        }
        for v in vs {
            self.check(v)?;
        }
        Ok((0..self.replicates())
            .into_par_iter()
            .map(|r| vs.iter().map(|v| self.resampled_mean(r, v)).sum::<f64>() / vs.len() as f64)
            .collect())
    }

    pub fn ci(&self, v: &[f64]) -> Result<Interval> {
        let reps = self.replicate_means(v)?;
        Ok(Interval::from_replicates(mean(v).unwrap_or(0.0), &reps))
    }

    pub fn averaged_ci(&self, vs: &[&[f64]]) -> Result<Interval> {
        let reps = self.averaged_replicates(vs)?;
        let estimate = vs.iter().map(|v| mean(v).unwrap_or(0.0)).sum::<f64>() / vs.len() as f64;
        Ok(Interval::from_replicates(estimate, &reps))
    }

    /// Interval of `mean(b) - mean(a)` with both resampled by the same indices.
    pub fn delta_ci(&self, a: &[f64], b: &[f64]) -> Result<Interval> {
        self.check(a)?;
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        self.check(b)?;
        self.ci(&diff)
    }

    /// Model-averaged paired delta: per replicate, the average over pairs of
    /// `mean(b) - mean(a)`.
    pub fn averaged_delta_ci(&self, pairs: &[(&[f64], &[f64])]) -> Result<Interval> {
        let diffs: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(a, b)| {
                self.check(a)?;
                self.check(b)?;
                Ok(a.iter().zip(b.iter()).map(|(x, y)| y - x).collect())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = diffs.iter().map(Vec::as_slice).collect();
        self.averaged_ci(&refs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub model: String,
    pub condition: String,
    #[serde(flatten)]
    pub interval: Interval,
}

/// Per-question values keyed by model, then condition.
pub type PerQuestionValues = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

/// Intervals per (model, condition) plus model-averaged rows per condition.
pub fn bootstrap_ci(values: &PerQuestionValues, plan: &BootstrapPlan) -> Result<Vec<CiRow>> {
    let mut rows = Vec::new();
    let mut by_condition: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (model, conds) in values {
        for (condition, v) in conds {
            rows.push(CiRow {
                model: model.clone(),
                condition: condition.clone(),
                interval: plan.ci(v)?,
            });
            by_condition.entry(condition).or_default().push(v);
        }
    }
    for (condition, vs) in by_condition {
        rows.push(CiRow {
            model: MODEL_AVERAGE.to_string(),
            condition: condition.to_string(),
            interval: plan.averaged_ci(&vs)?,
        });
    }
    Ok(rows)
}

/// The fixed list of (from, to) condition comparisons.
pub const DEFAULT_DELTA_PAIRS: [(&str, &str); 5] = [
    ("closed_book", "clean_evidence"),
    ("clean_evidence", "conflict_evidence"),
    ("closed_book", "standard_rag"),
    ("standard_rag", "agentic_rag"),
    ("closed_book", "max_context"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub model: String,
    pub from: String,
    pub to: String,
    pub accuracy: f64,
    pub high_risk: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_: f64,
    pub contradiction: f64,
    pub danger_oc: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub mean_latency_seconds: f64,
}

fn opt_delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

pub fn delta_row(a: &MetricsRow, b: &MetricsRow) -> DeltaRow {
    DeltaRow {
        model: a.model.clone(),
        from: a.condition.clone(),
        to: b.condition.clone(),
        accuracy: b.accuracy - a.accuracy,
        high_risk: b.high_risk - a.high_risk,
        unsafe_: b.unsafe_ - a.unsafe_,
        contradiction: b.contradiction - a.contradiction,
        danger_oc: opt_delta(a.danger_oc, b.danger_oc),
        mean_confidence: opt_delta(a.mean_confidence, b.mean_confidence),
        mean_latency_seconds: b.mean_latency_seconds - a.mean_latency_seconds,
    }
}

/// Signed `to - from` changes per model for every pair.
pub fn paired_deltas(rows: &[MetricsRow], pairs: &[(&str, &str)]) -> Result<Vec<DeltaRow>> {
    let index: BTreeMap<(&str, &str), &MetricsRow> = rows
        .iter()
        .map(|r| ((r.model.as_str(), r.condition.as_str()), r))
        .collect();
    let models: BTreeSet<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    let mut out = Vec::new();
    for (from, to) in pairs {
        for model in &models {
            let get = |c: &str| {
                index
                    .get(&(*model, c))
                    .copied()
                    .ok_or_else(|| Error::Missing(format!("no metrics for model {model} under condition {c}")))
            };
            out.push(delta_row(get(from)?, get(to)?));
        }
    }
    Ok(out)
}

fn average_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    mean(&present)
}

/// Condition rows averaged over models; optional columns average the models
/// for which they are defined.
pub fn model_average(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut by_condition: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_condition.entry(&r.condition).or_default().push(r);
    }
    by_condition
        .into_iter()
        .map(|(condition, rs)| {
            let avg = |f: fn(&MetricsRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            let avg_opt = |f: fn(&MetricsRow) -> Option<f64>| average_opt(rs.iter().map(|r| f(r)));
            MetricsRow {
                model: MODEL_AVERAGE.to_string(),
                condition: condition.to_string(),
                n_questions: rs.iter().map(|r| r.n_questions).max().unwrap_or(0),
                accuracy: avg(|r| r.accuracy),
                high_risk: avg(|r| r.high_risk),
                unsafe_: avg(|r| r.unsafe_),
                contradiction: avg(|r| r.contradiction),
                danger_oc: avg_opt(|r| r.danger_oc),
                null_rate: avg(|r| r.null_rate),
                mean_confidence: avg_opt(|r| r.mean_confidence),
                confidence_correct: avg_opt(|r| r.confidence_correct),
                confidence_incorrect: avg_opt(|r| r.confidence_incorrect),
                confidence_high_risk: avg_opt(|r| r.confidence_high_risk),
                confidence_unsafe: avg_opt(|r| r.confidence_unsafe),
                mean_latency_seconds: avg(|r| r.mean_latency_seconds),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub ss_total: f64,
    pub ss_family: f64,
    pub ss_condition: f64,
    pub ss_interaction: f64,
    pub ss_residual: f64,
    pub family_pct: f64,
    pub condition_pct: f64,
    pub interaction_pct: f64,
    pub residual_pct: f64,
}

/// Two-way decomposition of a model x condition grid into family,
/// condition, family x condition and residual (model within family) sums of
/// squares. Every model must be present under every condition.
pub fn variance_decomposition(
    values: &BTreeMap<(String, String), f64>,
    families: &BTreeMap<String, String>,
) -> Result<VarianceComponents> {
    let models: BTreeSet<&str> = values.keys().map(|(m, _)| m.as_str()).collect();
    let conditions: BTreeSet<&str> = values.keys().map(|(_, c)| c.as_str()).collect();
    if models.is_empty() {
        return Err(Error::Missing("empty variance grid".into()));
    }
    for m in &models {
        if !families.contains_key(*m) {
            return Err(Error::Missing(format!("no family for model {m}")));
        }
        for c in &conditions {
            if !values.contains_key(&(m.to_string(), c.to_string())) {
                return Err(Error::Missing(format!("missing grid cell ({m}, {c})")));
            }
        }
    }
    let z = |m: &str, c: &str| values[&(m.to_string(), c.to_string())];
    let n_models = models.len() as f64;
    let n_conds = conditions.len() as f64;
    let grand = values.values().sum::<f64>() / values.len() as f64;

    let mut members: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for m in &models {
        members.entry(families[*m].as_str()).or_default().push(m);
    }

    let ss_total: f64 = values.values().map(|v| (v - grand).powi(2)).sum();
    let mut ss_family = 0.0;
    let mut ss_cell = 0.0;
    for ms in members.values() {
        let nf = ms.len() as f64;
        let fam_mean = ms.iter().flat_map(|m| conditions.iter().map(move |c| z(m, c))).sum::<f64>() / (nf * n_conds);
        ss_family += nf * n_conds * (fam_mean - grand).powi(2);
        for c in &conditions {
            let cell_mean = ms.iter().map(|m| z(m, c)).sum::<f64>() / nf;
            ss_cell += nf * (cell_mean - grand).powi(2);
        }
    }
    let ss_condition: f64 = conditions
        .iter()
        .map(|c| {
            let cm = models.iter().map(|m| z(m, c)).sum::<f64>() / n_models;
            n_models * (cm - grand).powi(2)
        })
        .sum();
    let ss_interaction = ss_cell - ss_family - ss_condition;
    let ss_residual = ss_total - ss_cell;
    let pct = |ss: f64| if ss_total > 0.0 { 100.0 * ss / ss_total } else { 0.0 };
    Ok(VarianceComponents {
        ss_total,
        ss_family,
        ss_condition,
        ss_interaction,
        ss_residual,
        family_pct: pct(ss_family),
        condition_pct: pct(ss_condition),
        interaction_pct: pct(ss_interaction),
        residual_pct: pct(ss_residual),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseRow {
    pub rank: usize,
    pub question_id: String,
    pub subspecialties: Vec<String>,
    pub question_type: String,
    pub correct: Letter,
    pub common_wrong: Option<Letter>,
    pub n_models: usize,
    pub wrong_count: usize,
    pub high_risk_count: usize,
    pub unsafe_count: usize,
    pub contradiction_count: usize,
    pub wrong_rate: f64,
    pub high_risk_rate: f64,
    pub unsafe_rate: f64,
    pub contradiction_rate: f64,
}

fn question_counts(q: &Question, cells: &[&ScoredCell]) -> WorstCaseRow {
    let n = cells.len();
    let count = |f: fn(&ScoredCell) -> bool| cells.iter().filter(|c| f(c)).count();
    let wrong_count = count(|c| !c.outcome.correct);
    let high_risk_count = count(|c| c.outcome.high_risk);
    let unsafe_count = count(|c| c.outcome.unsafe_);
    let contradiction_count = count(|c| c.outcome.contradiction);
    let mut wrong_letters: BTreeMap<Letter, usize> = BTreeMap::new();
    for c in cells {
        if let Some(l) = c.final_option.letter() {
            if l != q.correct_letter() {
                *wrong_letters.entry(l).or_default() += 1;
            }
        }
    }
    // Ties go to the alphabetically first letter.
    let common_wrong = wrong_letters
        .iter()
        .fold(None::<(Letter, usize)>, |best, (&l, &k)| match best {
            Some((_, bk)) if bk >= k => best,
            _ => Some((l, k)),
        })
        .map(|(l, _)| l);
    let rate = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    WorstCaseRow {
        rank: 0,
        question_id: q.id.clone(),
        subspecialties: q.subspecialties.iter().map(|s| s.as_str().to_string()).collect(),
        question_type: q.question_type.as_str().to_string(),
        correct: q.correct_letter(),
        common_wrong,
        n_models: n,
        wrong_count,
        high_risk_count,
        unsafe_count,
        contradiction_count,
        wrong_rate: rate(wrong_count),
        high_risk_rate: rate(high_risk_count),
        unsafe_rate: rate(unsafe_count),
        contradiction_rate: rate(contradiction_count),
    }
}

/// Per-question failure counts over the given cells (typically one
/// condition, all models), ranked by high-risk, unsafe and contradiction
/// rates, descending, then by question id.
pub fn worst_case_ranking(benchmark: &Benchmark, cells: &[&ScoredCell]) -> Vec<WorstCaseRow> {
    let mut by_question: BTreeMap<&str, Vec<&ScoredCell>> = BTreeMap::new();
    for c in cells {
        by_question.entry(&c.question_id).or_default().push(c);
    }
    let mut rows: Vec<WorstCaseRow> = benchmark
        .questions
        .iter()
        .filter_map(|q| by_question.get(q.id.as_str()).map(|cs| question_counts(q, cs)))
        .collect();
    rows.sort_by(|a, b| {
        b.high_risk_rate
            .total_cmp(&a.high_risk_rate)
            .then(b.unsafe_rate.total_cmp(&a.unsafe_rate))
            .then(b.contradiction_rate.total_cmp(&a.contradiction_rate))
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossConditionRow {
    pub rank: usize,
    pub question_id: String,
    pub mean_high_risk_rate: f64,
    pub max_high_risk_rate: f64,
    pub by_condition: BTreeMap<String, f64>,
}

/// Questions ranked by high-risk rate averaged over conditions.
pub fn cross_condition_ranking(per_condition: &BTreeMap<String, Vec<WorstCaseRow>>) -> Vec<CrossConditionRow> {
    let mut by_question: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
    for (cond, rows) in per_condition {
        for r in rows {
            by_question.entry(&r.question_id).or_default().insert(cond.clone(), r.high_risk_rate);
        }
    }
    let mut out: Vec<CrossConditionRow> = by_question
        .into_iter()
        .map(|(id, by_condition)| {
            let rates: Vec<f64> = by_condition.values().copied().collect();
            CrossConditionRow {
                rank: 0,
                question_id: id.to_string(),
                mean_high_risk_rate: mean(&rates).unwrap_or(0.0),
                max_high_risk_rate: rates.iter().copied().fold(0.0, f64::max),
                by_condition,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.mean_high_risk_rate
            .total_cmp(&a.mean_high_risk_rate)
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKind {
    Subspecialty,
    QuestionType,
    SizeBucket,
}

impl StratumKind {
    pub const ALL: [StratumKind; 3] = [StratumKind::Subspecialty, StratumKind::QuestionType, StratumKind::SizeBucket];

    pub fn as_str(self) -> &'static str {
        match self {
            StratumKind::Subspecialty => "subspecialty",
            StratumKind::QuestionType => "question_type",
            StratumKind::SizeBucket => "size_bucket",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub kind: StratumKind,
    pub stratum: String,
    #[serde(flatten)]
    pub metrics: MetricsRow,
}

/// Metrics per stratum, model and condition, plus model-averaged rows.
/// Questions carrying several subspecialties contribute to each of them;
/// strata without cells are omitted.
pub fn stratified_report(
    benchmark: &Benchmark,
    cells: &[&ScoredCell],
    kind: StratumKind,
    buckets: &BTreeMap<String, SizeBucket>,
) -> Vec<StratumRow> {
    let questions: BTreeMap<&str, &Question> = benchmark.questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut groups: BTreeMap<String, BTreeMap<(&str, &str), Vec<&ScoredCell>>> = BTreeMap::new();
    for c in cells {
        let strata: Vec<String> = match kind {
            StratumKind::Subspecialty => questions
                .get(c.question_id.as_str())
                .map(|q| q.subspecialties.iter().map(|s| s.as_str().to_string()).collect())
                .unwrap_or_default(),
            StratumKind::QuestionType => questions
                .get(c.question_id.as_str())
                .map(|q| vec![q.question_type.as_str().to_string()])
                .unwrap_or_default(),
            StratumKind::SizeBucket => buckets
                .get(&c.model)
                .map(|b| vec![b.as_str().to_string()])
                .unwrap_or_default(),
        };
        for s in strata {
            groups
                .entry(s)
                .or_default()
                .entry((c.model.as_str(), c.condition.as_str()))
                .or_default()
                .push(c);
        }
    }
    let mut out = Vec::new();
    for (stratum, by_pair) in groups {
        let rows: Vec<MetricsRow> = by_pair
            .iter()
            .map(|((m, cond), cs)| MetricsRow::from_cells(m, cond, cs))
            .collect();
        let averaged = model_average(&rows);
        for metrics in rows.into_iter().chain(averaged) {
            out.push(StratumRow {
                kind,
                stratum: stratum.clone(),
                metrics,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub size_bucket: SizeBucket,
    pub condition: String,
    pub n_models: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub p90: f64,
    /// Cells with at least one generation call that needed a retry.
    pub retried_cells: usize,
}

/// Summary over per-model values.
pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    Some((mean(values)?, std_dev(values)?, percentile(values, 50.0)?, percentile(values, 90.0)?))
}

/// Latency per size bucket and condition, summarised over per-model mean
/// per-question latencies. `retried` holds (model, question, condition)
/// keys of cells whose calls were retried.
pub fn latency_summary(
    cells: &[&ScoredCell],
    buckets: &BTreeMap<String, SizeBucket>,
    retried: &BTreeSet<(String, String, String)>,
) -> Vec<LatencyRow> {
    let mut per_model: BTreeMap<(&str, &str), (Vec<f64>, usize)> = BTreeMap::new();
    for c in cells {
        let entry = per_model.entry((c.model.as_str(), c.condition.as_str())).or_default();
        entry.0.push(c.latency_seconds);
        if retried.contains(&(c.model.clone(), c.question_id.clone(), c.condition.clone())) {
            entry.1 += 1;
        }
    }
    let mut groups: BTreeMap<(SizeBucket, &str), (Vec<f64>, usize)> = BTreeMap::new();
    for ((model, cond), (lat, n_retried)) in &per_model {
        if let Some(b) = buckets.get(*model) {
            let g = groups.entry((*b, cond)).or_default();
            g.0.push(mean(lat).unwrap_or(0.0));
            g.1 += n_retried;
        }
    }
    groups
        .into_iter()
        .filter_map(|((size_bucket, cond), (means, retried_cells))| {
            let (mean, sd, median, p90) = summarize(&means)?;
            Some(LatencyRow {
                size_bucket,
                condition: cond.to_string(),
                n_models: means.len(),
                mean,
                sd,
                median,
                p90,
                retried_cells,
            })
        })
        .collect()
}
