//! Safety-annotated multiple-choice benchmarks: document format, loading,
//! validation and label-density statistics.
//!
//! A benchmark document is a single UTF-8 JSON object:
//!
//! ```json
//! {"schema_version": 1, "name": "...", "questions": [{
//!   "id": "Q1", "stem": "...", "options": ["...", "...", "...", "..."],
//!   "correct_index": 0,
//!   "labels": [{"high_risk": false, "unsafe": false, "contradiction": false}, ...],
//!   "clean_evidence": "...", "conflict_evidence": "...",
//!   "question_type": "diagnosis", "subspecialties": ["chest"],
//!   "source_subset": "..."}]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ballot::{Letter, MAX_OPTIONS, MIN_OPTIONS};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionSafetyLabels {
    pub high_risk: bool,
    #[serde(rename = "unsafe")]
    pub unsafe_: bool,
    pub contradiction: bool,
}

impl OptionSafetyLabels {
    pub fn new(high_risk: bool, unsafe_: bool, contradiction: bool) -> Self {
        Self {
            high_risk,
            unsafe_,
            contradiction,
        }
    }

    pub fn any(&self) -> bool {
        self.high_risk || self.unsafe_ || self.contradiction
    }

    pub fn get(&self, label: SafetyLabel) -> bool {
        match label {
            SafetyLabel::HighRisk => self.high_risk,
            SafetyLabel::Unsafe => self.unsafe_,
            SafetyLabel::Contradiction => self.contradiction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLabel {
    HighRisk,
    Unsafe,
    Contradiction,
}

impl SafetyLabel {
    pub const ALL: [SafetyLabel; 3] = [
        SafetyLabel::HighRisk,
        SafetyLabel::Unsafe,
        SafetyLabel::Contradiction,
    ];
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
                match norm.as_str() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(format!("unknown {} {s:?}", stringify!($name))),
                }
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_enum! {
    /// Primary question type; exactly one per question.
    QuestionType {
        Diagnosis => "diagnosis",
        NextStep => "next_step",
        Explanation => "explanation",
        DifferentialDiagnosis => "differential_diagnosis",
        Management => "management",
        Classification => "classification",
        Complication => "complication",
        Anatomy => "anatomy",
        Technical => "technical",
    }
}

string_enum! {
    /// Fixed 15-label subspecialty taxonomy; questions carry one or more.
    Subspecialty {
        Breast => "breast" | "breast_imaging",
        Chest => "chest" | "chest_imaging",
        Cardiac => "cardiac" | "cardiac_imaging",
        Abdominal => "abdominal" | "abdomen" | "abdominal_imaging",
        Genitourinary => "genitourinary" | "genitourinary_imaging",
        Neuroradiology => "neuroradiology",
        HeadAndNeck => "head_and_neck" | "head_neck" | "head_and_neck_imaging",
        Musculoskeletal => "musculoskeletal" | "musculoskeletal_imaging",
        Pediatric => "pediatric" | "pediatrics" | "pediatric_imaging",
        Vascular => "vascular" | "vascular_imaging",
        NuclearMedicine => "nuclear_medicine",
        Interventional => "interventional" | "interventional_radiology",
        Emergency => "emergency" | "emergency_radiology",
        Oncology => "oncology",
        PathologyCorrelation => "pathology_correlation",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    pub labels: Vec<OptionSafetyLabels>,
    pub clean_evidence: String,
    pub conflict_evidence: String,
    pub question_type: QuestionType,
    pub subspecialties: BTreeSet<Subspecialty>,
    /// Provenance only; never used for scoring.
    pub source_subset: String,
}

impl Question {
    pub fn option_count(&self) -> usize {
        self.options.len()
    }

    pub fn correct_letter(&self) -> Letter {
        Letter::new(self.correct_index).expect("correct_index validated on load")
    }

    /// Safety labels of the option behind `letter`, if it exists.
    pub fn labels_for(&self, letter: Letter) -> Option<&OptionSafetyLabels> {
        self.labels.get(letter.index())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Benchmark {
    pub name: String,
    pub questions: Vec<Question>,
}

impl Benchmark {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn to_document(&self) -> BenchmarkDocument {
        BenchmarkDocument {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            questions: self.questions.iter().map(QuestionRecord::from).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("benchmark serializes")
    }

    /// Hex SHA-256 of the canonical compact serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_document()).expect("benchmark serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkDocument {
    pub schema_version: u32,
    pub name: String,
    pub questions: Vec<QuestionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub high_risk: Option<bool>,
    #[serde(rename = "unsafe")]
    pub unsafe_: Option<bool>,
    pub contradiction: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: Option<String>,
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: i64,
    pub labels: Vec<LabelRecord>,
    #[serde(default)]
    pub clean_evidence: String,
    #[serde(default)]
    pub conflict_evidence: String,
    pub question_type: String,
    #[serde(default)]
    pub subspecialties: Vec<String>,
    #[serde(default)]
    pub source_subset: String,
}

impl From<&Question> for QuestionRecord {
    fn from(q: &Question) -> Self {
        QuestionRecord {
            id: Some(q.id.clone()),
            stem: q.stem.clone(),
            options: q.options.clone(),
            correct_index: q.correct_index as i64,
            labels: q
                .labels
                .iter()
                .map(|l| LabelRecord {
                    high_risk: Some(l.high_risk),
                    unsafe_: Some(l.unsafe_),
                    contradiction: Some(l.contradiction),
                })
                .collect(),
            clean_evidence: q.clean_evidence.clone(),
            conflict_evidence: q.conflict_evidence.clone(),
            question_type: q.question_type.to_string(),
            subspecialties: q.subspecialties.iter().map(|s| s.to_string()).collect(),
            source_subset: q.source_subset.clone(),
        }
    }
}

impl QuestionRecord {
    /// Converts a wire record into a typed question. Only field-level type
    /// problems are reported here; structural invariants are left to
    /// [`validate_benchmark`].
    fn into_question(self, position: usize) -> Result<Question> {
        let id = self.id.unwrap_or_default();
        let schema = |message: String| Error::Schema {
            question_id: if id.is_empty() {
                format!("#{position}")
            } else {
                id.clone()
            },
            message,
        };
        if id.trim().is_empty() {
            return Err(schema("id: missing or empty".into()));
        }
        let correct_index = usize::try_from(self.correct_index)
            .map_err(|_| schema(format!("correct_index: negative value {}", self.correct_index)))?;
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(j, l)| match (l.high_risk, l.unsafe_, l.contradiction) {
                (Some(h), Some(u), Some(d)) => Ok(OptionSafetyLabels::new(h, u, d)),
                _ => Err(schema(format!("labels[{j}]: incomplete binary safety labels"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let question_type = self
            .question_type
            .parse()
            .map_err(|e: String| schema(format!("question_type: {e}")))?;
        let subspecialties = self
            .subspecialties
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<BTreeSet<_>, String>>()
            .map_err(|e| schema(format!("subspecialties: {e}")))?;
        Ok(Question {
            id: id.clone(),
            stem: self.stem,
            options: self.options,
            correct_index,
            labels,
            clean_evidence: self.clean_evidence,
            conflict_evidence: self.conflict_evidence,
            question_type,
            subspecialties,
            source_subset: self.source_subset,
        })
    }
}

// ---------------------------------------------------------------------------
// Loading and validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub question_id: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.question_id, self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal findings, e.g. correct options carrying safety flags.
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    /// Require non-empty clean and conflict evidence (evidence conditions enabled).
    pub require_evidence: bool,
}

pub fn validate_benchmark(b: &Benchmark) -> ValidationReport {
    validate_benchmark_with(b, ValidationOptions::default())
}

pub fn validate_benchmark_with(b: &Benchmark, opts: ValidationOptions) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let mut violation = |q: &Question, field: &str, message: String| {
        report.violations.push(Violation {
            question_id: q.id.clone(),
            field: field.into(),
            message,
        })
    };

    for q in &b.questions {
        if !seen.insert(q.id.as_str()) {
            violation(q, "id", format!("duplicate question id {}", q.id));
        }
        let n = q.options.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
            violation(
                q,
                "options",
                format!("options out of range [{MIN_OPTIONS},{MAX_OPTIONS}] (got {n})"),
            );
        }
        if q.correct_index >= n {
            violation(
                q,
                "correct_index",
                format!("correct_index {} out of range for {n} options", q.correct_index),
            );
        }
        if q.labels.len() != n {
            violation(
                q,
                "labels",
                format!(
                    "labels/options length mismatch ({} labels, {n} options)",
                    q.labels.len()
                ),
            );
        }
        if q.subspecialties.is_empty() {
            violation(q, "subspecialties", "subspecialty required".into());
        }
        if q.stem.trim().is_empty() {
            violation(q, "stem", "empty question stem".into());
        }
        for (j, opt) in q.options.iter().enumerate() {
            if opt.trim().is_empty() {
                violation(q, "options", format!("option {j} is empty"));
            }
        }
        if opts.require_evidence {
            if q.clean_evidence.trim().is_empty() {
                violation(q, "clean_evidence", "clean evidence required".into());
            }
            if q.conflict_evidence.trim().is_empty() {
                violation(q, "conflict_evidence", "conflict evidence required".into());
            }
        }
    }

    for q in &b.questions {
        if let Some(l) = q.labels.get(q.correct_index) {
            if l.any() {
                report.warnings.push(Violation {
                    question_id: q.id.clone(),
                    field: "labels".into(),
                    message: "correct option carries safety flags".into(),
                });
            }
        }
    }
    report
}

/// Parses a benchmark document from a string. `origin` is used in errors.
pub fn parse_benchmark(text: &str, origin: &Path) -> Result<Benchmark> {
    let b = parse_benchmark_unchecked(text, origin)?;
    if let Some(v) = validate_benchmark(&b).violations.into_iter().next() {
        return Err(Error::Schema {
            question_id: v.question_id,
            message: v.message,
        });
    }
    Ok(b)
}

/// Parses without running [`validate_benchmark`]; only wire-level type
/// problems are errors.
pub fn parse_benchmark_unchecked(text: &str, origin: &Path) -> Result<Benchmark> {
    let doc: BenchmarkDocument = serde_json::from_str(text).map_err(|e| Error::Malformed {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Malformed {
            path: origin.to_path_buf(),
            message: format!("unsupported schema_version {}", doc.schema_version),
        });
    }
    let questions = doc
        .questions
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_question(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        name: doc.name,
        questions,
    })
}

pub fn load_benchmark(path: &Path) -> Result<Benchmark> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_benchmark(&text, path)
}

pub fn load_benchmark_unchecked(path: &Path) -> Result<Benchmark> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_benchmark_unchecked(&text, path)
}

// ---------------------------------------------------------------------------
// Label density

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDensity {
    pub label: SafetyLabel,
    pub labeled_options: usize,
    pub questions_with_label: usize,
    /// Labeled options / total options, in percent.
    pub option_pct: f64,
    /// Questions with at least one labeled option / N, in percent.
    pub question_pct: f64,
    /// Labeled options / N.
    pub mean_per_question: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub questions: usize,
    pub options: usize,
    pub labels: Vec<LabelDensity>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_source: BTreeMap<String, DensityReport>,
}

impl DensityReport {
    pub fn label(&self, label: SafetyLabel) -> &LabelDensity {
        self.labels
            .iter()
            .find(|d| d.label == label)
            .expect("all labels reported")
    }
}

fn ratio_pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn density_of<'a>(questions: impl Iterator<Item = &'a Question> + Clone) -> DensityReport {
    let n = questions.clone().count();
    let options: usize = questions.clone().map(|q| q.options.len()).sum();
    let labels = SafetyLabel::ALL
        .iter()
        .map(|&label| {
            let per_q: Vec<usize> = questions
                .clone()
                .map(|q| q.labels.iter().filter(|l| l.get(label)).count())
                .collect();
            let labeled: usize = per_q.iter().sum();
            let with_any = per_q.iter().filter(|&&c| c > 0).count();
            LabelDensity {
                label,
                labeled_options: labeled,
                questions_with_label: with_any,
                option_pct: ratio_pct(labeled, options),
                question_pct: ratio_pct(with_any, n),
                mean_per_question: if n == 0 { 0.0 } else { labeled as f64 / n as f64 },
            }
        })
        .collect();
    DensityReport {
        questions: n,
        options,
        labels,
        by_source: BTreeMap::new(),
    }
}

/// Option-level and question-level label densities, optionally split by
/// `source_subset`.
pub fn label_density_report(b: &Benchmark, by_source: bool) -> DensityReport {
    let mut report = density_of(b.questions.iter());
    if by_source {
        let sources: BTreeSet<&str> = b.questions.iter().map(|q| q.source_subset.as_str()).collect();
        for s in sources {
            let sub = density_of(b.questions.iter().filter(|q| q.source_subset == s));
            report.by_source.insert(s.to_string(), sub);
        }
    }
    report
}
