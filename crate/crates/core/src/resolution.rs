//! Maps raw generations to verified ballots.
//!
//! Direct parsing accepts a fixed pattern set: a bare letter, optionally
//! wrapped in brackets or emphasis and followed by punctuation, optionally
//! preceded by an "Answer:" / "answer is" style prefix. Anything else goes to
//! the constrained verifier, or becomes null when no verifier is configured.

use serde::{Deserialize, Serialize};

use crate::ballot::{Ballot, Letter};
use crate::benchmark::Question;
use crate::gateway::{call_with_retry, CallError, ChatBackend, ChatMessage, ChatRequest, RetryPolicy};

const PREFIXES: [&str; 8] = [
    "the correct answer is",
    "the final answer is",
    "the answer is",
    "final answer is",
    "final answer:",
    "correct answer:",
    "answer is",
    "answer:",
];

fn strip_wrapping(s: &str) -> &str {
    let mut s = s.trim();
    loop {
        let before = s;
        s = s.trim_end_matches(['.', ',', ';', ':', '!']).trim();
        for (open, close) in [("(", ")"), ("[", "]"), ("**", "**"), ("*", "*"), ("\"", "\""), ("'", "'")] {
            if s.len() >= open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len()..s.len() - close.len()].trim();
            }
        }
        s = s.strip_suffix(')').map_or(s, str::trim);
        if s == before {
            return s;
        }
    }
}

/// Returns the letter when `raw` unambiguously denotes one in-range option.
pub fn parse_direct(raw: &str, option_count: usize) -> Option<Letter> {
    let mut s = strip_wrapping(raw);
    let lower = s.to_ascii_lowercase();
    for p in PREFIXES {
        if lower.starts_with(p) {
            s = strip_wrapping(&s[p.len()..]);
            break;
        }
    }
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Letter::from_char(c, option_count),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedVia {
    Direct,
    Verifier,
    /// Verifier answered NONE.
    VerifierNone,
    /// Verifier reply was not a single allowed letter.
    VerifierInvalid,
    VerifierFailure,
    /// Indeterminate parse and no verifier configured.
    Unresolved,
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub ballot: Ballot,
    pub via: ResolvedVia,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifierReply {
    Letter(Letter),
    None,
    Invalid(String),
    Failure(String),
}

/// A constrained mapper from free text to one allowed letter. Implementations
/// receive the options but never the labels or the correct answer.
pub trait Verifier: Send + Sync {
    fn verify(&self, raw: &str, option_texts: &[String]) -> VerifierReply;
}

/// Interprets a verifier reply against the allowed letter range.
pub fn parse_verifier_reply(reply: &str, option_count: usize) -> VerifierReply {
    let s = strip_wrapping(reply);
    if s.eq_ignore_ascii_case("none") {
        return VerifierReply::None;
    }
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => match Letter::from_char(c, option_count) {
            Some(l) => VerifierReply::Letter(l),
            None => VerifierReply::Invalid(reply.to_string()),
        },
        _ => VerifierReply::Invalid(reply.to_string()),
    }
}

pub fn verifier_system_prompt(option_count: usize) -> String {
    let letters: Vec<String> = Letter::range(option_count).map(|l| l.to_string()).collect();
    format!(
        "You map a model response to a multiple-choice answer letter. Allowed letters: {}.\n\
         Reply with exactly one allowed letter, or NONE if the response does not select \
         exactly one option unambiguously. Do not judge whether the answer is correct.",
        letters.join(", ")
    )
}

pub fn verifier_user_prompt(raw: &str, option_texts: &[String]) -> String {
    let options = option_texts
        .iter()
        .enumerate()
        .filter_map(|(j, t)| Letter::new(j).map(|l| format!("{l}. {t}")))
        .collect::<Vec<_>>()
        .join("\n");
    format!("Options:\n{options}\n\nModel response:\n{raw}")
}

/// Verifier backed by a chat model at temperature 0.
pub struct ModelVerifier {
    backend: Box<dyn ChatBackend>,
    model: String,
    policy: RetryPolicy,
}

impl ModelVerifier {
    pub fn new(backend: Box<dyn ChatBackend>, model: impl Into<String>, policy: RetryPolicy) -> Self {
        ModelVerifier {
            backend,
            model: model.into(),
            policy,
        }
    }
}

impl Verifier for ModelVerifier {
    fn verify(&self, raw: &str, option_texts: &[String]) -> VerifierReply {
        let req = ChatRequest {
            model: self.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: verifier_system_prompt(option_texts.len()),
                },
                ChatMessage {
                    role: "user".into(),
                    content: verifier_user_prompt(raw, option_texts),
                },
            ],
            temperature: 0.0,
            max_tokens: 5,
            n: 1,
            logprobs: false,
            top_logprobs: None,
        };
        match call_with_retry(self.backend.as_ref(), &req, &self.policy).result {
            Ok(texts) => match texts.first() {
                Some(t) => parse_verifier_reply(t, option_texts.len()),
                None => VerifierReply::Failure("empty verifier response".into()),
            },
            Err(CallError::Auth) => VerifierReply::Failure("verifier authentication rejected".into()),
            Err(CallError::Transient(m)) | Err(CallError::Permanent(m)) => VerifierReply::Failure(m),
        }
    }
}

/// Resolves an indeterminate parse. Returns null when the verifier is
/// disabled, answers NONE, replies out of range, or fails.
pub fn verify_constrained(raw: &str, q: &Question, verifier: Option<&dyn Verifier>) -> Resolution {
    let null = |via| Resolution {
        ballot: Ballot::Null,
        via,
    };
    if raw.trim().is_empty() {
        return null(ResolvedVia::EmptyText);
    }
    let Some(v) = verifier else {
        return null(ResolvedVia::Unresolved);
    };
    match v.verify(raw, &q.options) {
        VerifierReply::Letter(l) if l.index() < q.option_count() => Resolution {
            ballot: Ballot::Valid(l),
            via: ResolvedVia::Verifier,
        },
        VerifierReply::Letter(_) | VerifierReply::Invalid(_) => null(ResolvedVia::VerifierInvalid),
        VerifierReply::None => null(ResolvedVia::VerifierNone),
        VerifierReply::Failure(m) => {
            log::warn!("verifier failure on question {}: {m}", q.id);
            null(ResolvedVia::VerifierFailure)
        }
    }
}

pub fn resolve_text(raw: &str, q: &Question, verifier: Option<&dyn Verifier>) -> Resolution {
    match parse_direct(raw, q.option_count()) {
        Some(l) => Resolution {
            ballot: Ballot::Valid(l),
            via: ResolvedVia::Direct,
        },
        None => verify_constrained(raw, q, verifier),
    }
}

/// Resolves a record's raw text and stores the result on it.
pub fn resolve_ballot(
    record: &mut crate::gateway::GenerationRecord,
    q: &Question,
    verifier: Option<&dyn Verifier>,
) -> Ballot {
    let r = resolve_text(&record.raw_text, q, verifier);
    record.resolution = Some(r);
    r.ballot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::fixtures::question;
    use crate::condition::render_options;
    use proptest::prelude::*;
    use std::sync::Mutex;

    struct Scripted {
        reply: VerifierReply,
        seen: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(reply: VerifierReply) -> Self {
            Scripted {
                reply,
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Verifier for Scripted {
        fn verify(&self, raw: &str, _options: &[String]) -> VerifierReply {
            self.seen.lock().unwrap().push(raw.to_string());
            self.reply.clone()
        }
    }

    #[test]
    fn direct_parse_examples() {
        assert_eq!(parse_direct("B", 4), Some(Letter::B));
        assert_eq!(parse_direct("answer: c.", 5), Some(Letter::C));
        assert_eq!(parse_direct("A or B", 4), None);
        assert_eq!(parse_direct("E", 4), None);
        assert_eq!(parse_direct("E", 5), Some(Letter::E));
        assert_eq!(parse_direct(" (d) ", 4), Some(Letter::D));
        assert_eq!(parse_direct("The answer is **A**.", 4), Some(Letter::A));
        assert_eq!(parse_direct("C)", 4), Some(Letter::C));
        assert_eq!(parse_direct("AB", 4), None);
        assert_eq!(parse_direct("", 4), None);
        assert_eq!(parse_direct("Answer: A, B", 4), None);
    }

    #[test]
    fn verifier_passes_letter_through() {
        let q = question("Q1", 4, 0);
        let v = Scripted::new(VerifierReply::Letter(Letter::D));
        let r = resolve_text("The pulmonary sequestration answer, i.e. D", &q, Some(&v));
        assert_eq!(r.ballot, Ballot::Valid(Letter::D));
        assert_eq!(r.via, ResolvedVia::Verifier);
    }

    #[test]
    fn empty_text_is_null_without_verifier_call() {
        let q = question("Q1", 4, 0);
        let v = Scripted::new(VerifierReply::Letter(Letter::A));
        assert_eq!(verify_constrained("  ", &q, Some(&v)).ballot, Ballot::Null);
        assert!(v.seen.lock().unwrap().is_empty());
    }

    #[test]
    fn out_of_range_verifier_reply_is_null() {
        let q = question("Q1", 4, 0);
        assert!(matches!(parse_verifier_reply("F", 4), VerifierReply::Invalid(_)));
        assert!(matches!(parse_verifier_reply("E", 4), VerifierReply::Invalid(_)));
        assert_eq!(parse_verifier_reply("none.", 4), VerifierReply::None);
        assert_eq!(parse_verifier_reply(" c ", 4), VerifierReply::Letter(Letter::C));
        let v = Scripted::new(parse_verifier_reply("F", 4));
        let r = resolve_text("something about option F", &q, Some(&v));
        assert_eq!(r, Resolution { ballot: Ballot::Null, via: ResolvedVia::VerifierInvalid });
        // A letter outside the question's range is rejected even if the verifier claims it.
        let v = Scripted::new(VerifierReply::Letter(Letter::E));
        assert_eq!(resolve_text("maybe the last one", &q, Some(&v)).ballot, Ballot::Null);
    }

    #[test]
    fn resolve_examples() {
        let q = question("Q1", 4, 0);
        assert_eq!(resolve_text("A", &q, None).ballot, Ballot::Valid(Letter::A));
        assert_eq!(resolve_text("qwpoeiru", &q, None).ballot, Ballot::Null);
        let v = Scripted::new(VerifierReply::None);
        let r = resolve_text("Both A and C seem right", &q, Some(&v));
        assert_eq!(r, Resolution { ballot: Ballot::Null, via: ResolvedVia::VerifierNone });
        let v = Scripted::new(VerifierReply::Failure("down".into()));
        assert_eq!(resolve_text("hmm", &q, Some(&v)).via, ResolvedVia::VerifierFailure);
    }

    #[test]
    fn verifier_prompt_never_mentions_answer() {
        let mut q = question("Q1", 4, 2);
        q.labels[1].high_risk = true;
        let sys = verifier_system_prompt(4);
        assert!(sys.contains("Allowed letters: A, B, C, D."));
        let user = verifier_user_prompt("raw", &q.options);
        assert_eq!(user, format!("Options:\n{}\n\nModel response:\nraw", render_options(&q)));
        assert!(!user.to_lowercase().contains("correct"));
    }

    proptest! {
        #[test]
        fn resolved_ballot_always_in_range(raw in ".{0,12}", n in 4usize..=5) {
            let q = question("Q1", n, 0);
            for reply in [VerifierReply::Letter(Letter::E), VerifierReply::Letter(Letter::B), VerifierReply::None] {
                let v = Scripted::new(reply);
                if let Ballot::Valid(l) = resolve_text(&raw, &q, Some(&v)).ballot {
                    prop_assert!(l.index() < n);
                }
            }
        }

        #[test]
        fn disabling_verifier_only_adds_nulls(raw in "[A-Ea-e .:()*]{0,10}|[a-z ]{0,20}", letter in 0usize..4) {
            let q = question("Q1", 4, 0);
            let v = Scripted::new(VerifierReply::Letter(Letter::new(letter).unwrap()));
            let with = resolve_text(&raw, &q, Some(&v)).ballot;
            let without = resolve_text(&raw, &q, None).ballot;
            prop_assert!(without == with || without == Ballot::Null);
        }
    }
}
