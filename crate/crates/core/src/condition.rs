//! Deployment conditions and prompt assembly.
//!
//! Every condition renders the same question-and-options block; conditions
//! differ only in the context placed before it. Template text lives verbatim
//! in `resources/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ballot::Letter;
use crate::benchmark::Question;
use crate::error::{Error, Result};

pub const SYSTEM_PROMPT: &str = include_str!("../resources/system_prompt.txt");
pub const CLOSED_BOOK_TEMPLATE: &str = include_str!("../resources/closed_book_template.txt");
pub const CONTEXT_TEMPLATE: &str = include_str!("../resources/context_template.txt");

/// Tokens reserved for the question-and-options block.
pub const QUESTION_BLOCK_RESERVE: u64 = 2048;
/// Tokens reserved for the generation budget.
pub const GENERATION_RESERVE: u64 = 4096;
/// Extra safety margin.
pub const SAFETY_MARGIN: u64 = 1000;

pub const CONTEXT_32K_BUDGET: u64 = 32_768;
pub const CONTEXT_100K_BUDGET: u64 = 102_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    ClosedBook,
    CleanEvidence,
    ConflictEvidence,
    StandardRag,
    AgenticRag,
    MaxContext,
    #[serde(rename = "context_32k")]
    Context32k,
    #[serde(rename = "context_100k")]
    Context100k,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 8] = [
        ConditionKind::ClosedBook,
        ConditionKind::CleanEvidence,
        ConditionKind::ConflictEvidence,
        ConditionKind::StandardRag,
        ConditionKind::AgenticRag,
        ConditionKind::MaxContext,
        ConditionKind::Context32k,
        ConditionKind::Context100k,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::ClosedBook => "closed_book",
            ConditionKind::CleanEvidence => "clean_evidence",
            ConditionKind::ConflictEvidence => "conflict_evidence",
            ConditionKind::StandardRag => "standard_rag",
            ConditionKind::AgenticRag => "agentic_rag",
            ConditionKind::MaxContext => "max_context",
            ConditionKind::Context32k => "context_32k",
            ConditionKind::Context100k => "context_100k",
        }
    }

    /// Label used by the original inference logs.
    pub fn default_internal_name(self) -> &'static str {
        match self {
            ConditionKind::ClosedBook => "zero_shot",
            ConditionKind::StandardRag => "top_10",
            ConditionKind::MaxContext => "context_max",
            other => other.as_str(),
        }
    }

    /// Conditions whose context comes from precomputed files.
    pub fn requires_context_dir(self) -> bool {
        matches!(
            self,
            ConditionKind::StandardRag
                | ConditionKind::AgenticRag
                | ConditionKind::MaxContext
                | ConditionKind::Context32k
                | ConditionKind::Context100k
        )
    }

    pub fn is_evidence(self) -> bool {
        matches!(self, ConditionKind::CleanEvidence | ConditionKind::ConflictEvidence)
    }

    pub fn is_budgeted(self) -> bool {
        matches!(
            self,
            ConditionKind::MaxContext | ConditionKind::Context32k | ConditionKind::Context100k
        )
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ConditionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.default_internal_name() == s)
            .ok_or_else(|| format!("unknown condition kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    /// Output label; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_name: Option<String>,
}

impl ConditionSpec {
    pub fn new(kind: ConditionKind) -> Self {
        ConditionSpec {
            kind,
            name: None,
            context_dir: None,
            internal_name: None,
        }
    }

    pub fn with_context_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.context_dir = Some(dir.into());
        self
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.as_str())
    }

    pub fn internal_label(&self) -> &str {
        self.internal_name
            .as_deref()
            .unwrap_or(self.kind.default_internal_name())
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.requires_context_dir(), &self.context_dir) {
            (true, None) => Err(Error::Config(format!(
                "condition {} requires a context_dir",
                self.label()
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "condition {} must not set a context_dir",
                self.label()
            ))),
            _ => Ok(()),
        }
    }

    /// Context budget for a model with the given maximum context, if the
    /// condition is budgeted. Errors when the model cannot host the condition.
    pub fn context_budget(&self, model_max_tokens: u64) -> Result<Option<u64>> {
        let max_budget = || compute_max_context_budget(model_max_tokens);
        match self.kind {
            ConditionKind::MaxContext => max_budget().map(Some),
            ConditionKind::Context32k | ConditionKind::Context100k => {
                let fixed = if self.kind == ConditionKind::Context32k {
                    CONTEXT_32K_BUDGET
                } else {
                    CONTEXT_100K_BUDGET
                };
                let available = max_budget()?;
                if available < fixed {
                    Err(Error::Config(format!(
                        "{} needs {fixed} context tokens; model admits {available}",
                        self.label()
                    )))
                } else {
                    Ok(Some(fixed))
                }
            }
            _ => Ok(None),
        }
    }
}

/// Context budget left after reserving the question block, generation budget
/// and margin.
pub fn compute_max_context_budget(model_max_tokens: u64) -> Result<u64> {
    let reserved = QUESTION_BLOCK_RESERVE + GENERATION_RESERVE + SAFETY_MARGIN;
    match model_max_tokens.checked_sub(reserved) {
        Some(b) if b > 0 => Ok(b),
        _ => Err(Error::NonPositiveBudget {
            max_context_tokens: model_max_tokens,
        }),
    }
}

// ---------------------------------------------------------------------------
// Token estimation

pub trait TokenEstimator: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` ending on a whole token that fits `budget`.
    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str;
}

/// Counts whitespace-delimited tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceEstimator;

impl TokenEstimator for WhitespaceEstimator {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str {
        if budget == 0 {
            return "";
        }
        let mut seen = 0;
        let mut in_token = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if in_token {
                    in_token = false;
                    if seen == budget {
                        return &text[..i];
                    }
                }
            } else if !in_token {
                in_token = true;
                seen += 1;
            }
        }
        text.trim_end()
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_prompt: String,
    pub context_token_estimate: usize,
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        }) {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn has_delimiter(text: &str) -> bool {
    text.lines().any(|line| {
        let l = line.trim_start();
        l.starts_with("Question:") || l.starts_with("Options:")
    })
}

/// Renders options one per line as `A. <text>`.
pub fn render_options(q: &Question) -> String {
    q.options
        .iter()
        .enumerate()
        .map(|(j, text)| {
            let letter = Letter::new(j).expect("option count validated");
            format!("{letter}. {text}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn check_question_text(q: &Question) -> Result<()> {
    if has_delimiter(&q.stem) {
        return Err(Error::Prompt(format!(
            "question {} stem contains a template delimiter",
            q.id
        )));
    }
    for (j, opt) in q.options.iter().enumerate() {
        if opt.contains('\n') || has_delimiter(opt) {
            return Err(Error::Prompt(format!(
                "question {} option {j} contains a template delimiter",
                q.id
            )));
        }
    }
    Ok(())
}

pub fn build_prompt(q: &Question, c: &ConditionSpec, context: Option<&str>) -> Result<PromptBundle> {
    build_prompt_with(q, c, context, &WhitespaceEstimator)
}

pub fn build_prompt_with(
    q: &Question,
    c: &ConditionSpec,
    context: Option<&str>,
    estimator: &dyn TokenEstimator,
) -> Result<PromptBundle> {
    check_question_text(q)?;
    let evidence;
    let context = match c.kind {
        ConditionKind::ClosedBook => {
            if context.is_some() {
                return Err(Error::Prompt("closed-book prompts take no context".into()));
            }
            None
        }
        ConditionKind::CleanEvidence | ConditionKind::ConflictEvidence => {
            if context.is_some() {
                return Err(Error::Prompt(
                    "evidence conditions take their context from the question".into(),
                ));
            }
            evidence = if c.kind == ConditionKind::CleanEvidence {
                &q.clean_evidence
            } else {
                &q.conflict_evidence
            };
            if evidence.trim().is_empty() {
                return Err(Error::Unevaluable {
                    question_id: q.id.clone(),
                    condition: c.label().to_string(),
                    reason: "empty evidence".into(),
                });
            }
            Some(evidence.as_str())
        }
        _ => Some(context.ok_or_else(|| Error::Unevaluable {
            question_id: q.id.clone(),
            condition: c.label().to_string(),
            reason: "missing context".into(),
        })?),
    };

    let options = render_options(q);
    let user_prompt = match context {
        None => render(CLOSED_BOOK_TEMPLATE, &[("question", &q.stem), ("options", &options)]),
        Some(ctx) => render(
            CONTEXT_TEMPLATE,
            &[("context", ctx), ("question", &q.stem), ("options", &options)],
        ),
    };
    Ok(PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_prompt,
        context_token_estimate: context.map_or(0, |c| estimator.count(c)),
    })
}

/// Path of the precomputed context for a question under a directory.
pub fn context_path(dir: &Path, question_id: &str) -> PathBuf {
    dir.join(format!("{question_id}.txt"))
}

/// Reads the precomputed context for `q`, truncated to `budget` tokens when set.
pub fn load_fixed_context(
    q: &Question,
    c: &ConditionSpec,
    budget: Option<u64>,
    estimator: &dyn TokenEstimator,
) -> Result<String> {
    let dir = c.context_dir.as_deref().ok_or_else(|| {
        Error::Config(format!("condition {} has no context_dir", c.label()))
    })?;
    let path = context_path(dir, &q.id);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Unevaluable {
        question_id: q.id.clone(),
        condition: c.label().to_string(),
        reason: format!("context file {}: {e}", path.display()),
    })?;
    Ok(match budget {
        Some(b) => estimator
            .truncate(&text, usize::try_from(b).unwrap_or(usize::MAX))
            .to_string(),
        None => text,
    })
}
