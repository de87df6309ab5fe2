//! Fixed three-model majority-vote ensembles built from stored main-grid
//! cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ballot::{Ballot, Letter};
use crate::benchmark::Benchmark;
use crate::error::{Error, Result};
use crate::scoring::{rates_of, score_final, Metric, MetricsRow, Outcome, ScoredCell, ThresholdRule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub name: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub purpose: String,
}

impl EnsembleSpec {
    pub fn new(name: impl Into<String>, members: [&str; 3], purpose: impl Into<String>) -> Self {
        EnsembleSpec {
            name: name.into(),
            members: members.iter().map(|m| m.to_string()).collect(),
            purpose: purpose.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() != 3 {
            return Err(Error::Config(format!(
                "ensemble {} needs exactly 3 members, got {}",
                self.name,
                self.members.len()
            )));
        }
        Ok(())
    }
}

/// Replaces one member of an ensemble with each candidate in turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub ensemble: String,
    pub replace: String,
    pub with: Vec<String>,
}

impl AblationSpec {
    pub fn expand(&self, base: &EnsembleSpec) -> Result<Vec<EnsembleSpec>> {
        let slot = base
            .members
            .iter()
            .position(|m| *m == self.replace)
            .ok_or_else(|| Error::Config(format!("{} is not a member of ensemble {}", self.replace, base.name)))?;
        Ok(self
            .with
            .iter()
            .map(|candidate| {
                let mut members = base.members.clone();
                members[slot] = candidate.clone();
                EnsembleSpec {
                    name: format!("{}[{}->{}]", base.name, self.replace, candidate),
                    members,
                    purpose: format!("ablation of {}", base.name),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteKind {
    /// Two or three members agree on a valid option.
    Majority,
    /// Three distinct valid options; the alphabetically first wins.
    AllDistinct,
    /// One null and two disagreeing valid options.
    SplitWithNull,
    /// No valid majority otherwise (two or three nulls).
    Null,
}

pub fn ensemble_vote(finals: [Ballot; 3]) -> (Ballot, VoteKind) {
    let letters: Vec<Letter> = finals.iter().filter_map(|b| b.letter()).collect();
    for l in &letters {
        if letters.iter().filter(|x| *x == l).count() >= 2 {
            return (Ballot::Valid(*l), VoteKind::Majority);
        }
    }
    match letters.len() {
        3 => (Ballot::Valid(*letters.iter().min().expect("three letters")), VoteKind::AllDistinct),
        2 => (Ballot::Null, VoteKind::SplitWithNull),
        _ => (Ballot::Null, VoteKind::Null),
    }
}

/// Mean confidence of the members that selected the ensemble answer.
pub fn ensemble_confidence(finals: [Ballot; 3], confidences: [f64; 3], answer: Ballot) -> Result<f64> {
    if answer.is_null() {
        return Err(Error::Missing("ensemble confidence is undefined for a null answer".into()));
    }
    let support: Vec<f64> = finals
        .iter()
        .zip(confidences)
        .filter(|(b, _)| **b == answer)
        .map(|(_, c)| c)
        .collect();
    let first = *support
        .first()
        .ok_or_else(|| Error::Mismatch(format!("no member selected ensemble answer {answer}")))?;
    // Offsets from the first value keep the mean of identical values exact.
    Ok(first + support.iter().map(|c| c - first).sum::<f64>() / support.len() as f64)
}

pub fn synchronized_failure(finals: [Ballot; 3], correct: Letter) -> bool {
    match finals[0] {
        Ballot::Valid(l) => l != correct && finals.iter().all(|b| *b == finals[0]),
        Ballot::Null => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCell {
    pub ensemble: String,
    pub question_id: String,
    pub condition: String,
    pub member_finals: [Ballot; 3],
    pub answer: Ballot,
    pub vote_kind: VoteKind,
    pub confidence: Option<f64>,
    pub synchronized_failure: bool,
    pub outcome: Outcome,
}

/// Main-grid cells indexed by (model, question, condition).
pub type CellIndex<'a> = BTreeMap<(&'a str, &'a str, &'a str), &'a ScoredCell>;

pub fn index_cells(cells: &[ScoredCell]) -> CellIndex<'_> {
    cells
        .iter()
        .map(|c| ((c.model.as_str(), c.question_id.as_str(), c.condition.as_str()), c))
        .collect()
}

/// Ensemble answers for every question under one condition. Dangerous
/// overconfidence uses a strict `confidence > theta` comparison.
pub fn evaluate_ensemble(
    spec: &EnsembleSpec,
    benchmark: &Benchmark,
    cells: &CellIndex<'_>,
    condition: &str,
    theta: f64,
) -> Result<Vec<EnsembleCell>> {
    spec.validate()?;
    benchmark
        .questions
        .iter()
        .map(|q| {
            let mut finals = [Ballot::Null; 3];
            let mut confs = [0.0; 3];
            for (slot, member) in spec.members.iter().enumerate() {
                let cell = cells
                    .get(&(member.as_str(), q.id.as_str(), condition))
                    .ok_or_else(|| Error::Missing(format!("no cell for member {member} on {} under {condition}", q.id)))?;
                finals[slot] = cell.final_option;
                confs[slot] = cell.confidence.unwrap_or(0.0);
            }
            let (answer, vote_kind) = ensemble_vote(finals);
            let confidence = if answer.is_null() {
                None
            } else {
                Some(ensemble_confidence(finals, confs, answer)?)
            };
            Ok(EnsembleCell {
                ensemble: spec.name.clone(),
                question_id: q.id.clone(),
                condition: condition.to_string(),
                member_finals: finals,
                answer,
                vote_kind,
                confidence,
                synchronized_failure: synchronized_failure(finals, q.correct_letter()),
                outcome: score_final(answer, confidence, q, theta, ThresholdRule::Strict)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub ensemble: String,
    pub condition: String,
    pub members: Vec<String>,
    pub purpose: String,
    pub n_questions: usize,
    pub accuracy: f64,
    pub high_risk: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_: f64,
    pub contradiction: f64,
    pub danger_oc: f64,
    pub synchronized_failure: f64,
    pub mean_confidence: Option<f64>,
    pub split_with_null: usize,
    pub all_distinct: usize,
}

impl EnsembleRow {
    pub fn from_cells(spec: &EnsembleSpec, condition: &str, cells: &[EnsembleCell]) -> Self {
        let rates = rates_of(cells.iter().map(|c| &c.outcome));
        let n = cells.len();
        let sync = cells.iter().filter(|c| c.synchronized_failure).count();
        let confs: Vec<f64> = cells.iter().filter_map(|c| c.confidence).collect();
        EnsembleRow {
            ensemble: spec.name.clone(),
            condition: condition.to_string(),
            members: spec.members.clone(),
            purpose: spec.purpose.clone(),
            n_questions: n,
            accuracy: rates.accuracy,
            high_risk: rates.high_risk,
            unsafe_: rates.unsafe_,
            contradiction: rates.contradiction,
            danger_oc: rates.danger_oc,
            synchronized_failure: if n == 0 { 0.0 } else { 100.0 * sync as f64 / n as f64 },
            mean_confidence: (!confs.is_empty()).then(|| confs.iter().sum::<f64>() / confs.len() as f64),
            split_with_null: cells.iter().filter(|c| c.vote_kind == VoteKind::SplitWithNull).count(),
            all_distinct: cells.iter().filter(|c| c.vote_kind == VoteKind::AllDistinct).count(),
        }
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Accuracy => Some(self.accuracy),
            Metric::HighRisk => Some(self.high_risk),
            Metric::Unsafe => Some(self.unsafe_),
            Metric::Contradiction => Some(self.contradiction),
            Metric::DangerOc => Some(self.danger_oc),
            Metric::MeanConfidence => self.mean_confidence,
            Metric::Latency => None,
        }
    }
}

/// Ensemble value minus the best member's value for one metric. The best
/// member has the highest accuracy or the lowest failure rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestMemberDelta {
    pub ensemble: String,
    pub condition: String,
    pub metric: Metric,
    pub ensemble_value: f64,
    pub best_member: String,
    pub best_value: f64,
    pub delta: f64,
    pub ensemble_better: bool,
}

pub fn best_member_delta(
    ensemble: &str,
    condition: &str,
    metric: Metric,
    ensemble_value: f64,
    members: &[(String, f64)],
) -> Result<BestMemberDelta> {
    let higher = metric.higher_is_better();
    let (best_member, best_value) = members
        .iter()
        .fold(None::<&(String, f64)>, |best, cand| match best {
            Some(b) if (higher && b.1 >= cand.1) || (!higher && b.1 <= cand.1) => Some(b),
            _ => Some(cand),
        })
        .cloned()
        .ok_or_else(|| Error::Missing(format!("no member metrics for ensemble {ensemble}")))?;
    let delta = ensemble_value - best_value;
    Ok(BestMemberDelta {
        ensemble: ensemble.to_string(),
        condition: condition.to_string(),
        metric,
        ensemble_value,
        best_member,
        best_value,
        delta,
        ensemble_better: if higher { delta > 0.0 } else { delta < 0.0 },
    })
}

/// Best-member deltas for accuracy and the failure metrics.
pub fn best_member_deltas(row: &EnsembleRow, member_rows: &[&MetricsRow]) -> Result<Vec<BestMemberDelta>> {
    [Metric::Accuracy, Metric::HighRisk, Metric::Unsafe, Metric::Contradiction, Metric::DangerOc]
        .into_iter()
        .filter_map(|m| {
            let ens = row.metric(m)?;
            let members: Vec<(String, f64)> =
                member_rows.iter().filter_map(|r| Some((r.model.clone(), r.metric(m)?))).collect();
            Some(best_member_delta(&row.ensemble, &row.condition, m, ens, &members))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: Ballot = Ballot::Valid(Letter::A);
    const B: Ballot = Ballot::Valid(Letter::B);
    const C: Ballot = Ballot::Valid(Letter::C);
    const N: Ballot = Ballot::Null;

    #[test]
    fn vote_examples() {
        assert_eq!(ensemble_vote([A, A, B]), (A, VoteKind::Majority));
        assert_eq!(ensemble_vote([C, B, A]), (A, VoteKind::AllDistinct));
        assert_eq!(ensemble_vote([N, N, N]), (N, VoteKind::Null));
        assert_eq!(ensemble_vote([B, N, B]), (B, VoteKind::Majority));
        assert_eq!(ensemble_vote([A, N, B]), (N, VoteKind::SplitWithNull));
        assert_eq!(ensemble_vote([A, N, N]), (N, VoteKind::Null));
    }

    #[test]
    fn confidence_examples() {
        assert!((ensemble_confidence([A, A, B], [0.9, 0.7, 0.5], A).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(ensemble_confidence([A, B, C], [0.6, 0.9, 0.9], A).unwrap(), 0.6);
        assert_eq!(ensemble_confidence([A, A, A], [1.0, 1.0, 1.0], A).unwrap(), 1.0);
        assert_eq!(ensemble_confidence([A, A, A], [0.1, 0.1, 0.1], A).unwrap(), 0.1);
        assert!(ensemble_confidence([N, N, N], [1.0; 3], N).is_err());
    }

    #[test]
    fn synchronized_failure_examples() {
        assert!(synchronized_failure([B, B, B], Letter::A));
        assert!(!synchronized_failure([B, B, A], Letter::A));
        assert!(!synchronized_failure([A, A, A], Letter::A));
        assert!(!synchronized_failure([N, N, N], Letter::A));
    }

    #[test]
    fn best_member_examples() {
        let members = vec![("m1".to_string(), 79.9), ("m2".to_string(), 86.9), ("m3".to_string(), 86.4)];
        let d = best_member_delta("dense_mid", "closed_book", Metric::Accuracy, 86.5, &members).unwrap();
        assert_eq!(d.best_member, "m2");
        assert!((d.delta + 0.4).abs() < 1e-9);
        assert!(!d.ensemble_better);

        let hr = vec![("m1".to_string(), 9.0), ("m2".to_string(), 5.0), ("m3".to_string(), 5.5)];
        let d = best_member_delta("dense_mid", "closed_book", Metric::HighRisk, 4.5, &hr).unwrap();
        assert!((d.delta + 0.5).abs() < 1e-9);
        assert!(d.ensemble_better);

        let same = best_member_delta("e", "c", Metric::Unsafe, 1.0, &[("m".into(), 1.0)]).unwrap();
        assert_eq!((same.delta, same.ensemble_better), (0.0, false));
    }

    #[test]
    fn ablation_expands_one_row_per_candidate() {
        let base = EnsembleSpec::new("e", ["a", "b", "c"], "");
        let ab = AblationSpec { ensemble: "e".into(), replace: "b".into(), with: vec!["x".into(), "y".into()] };
        let specs = ab.expand(&base).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].members, ["a", "y", "c"]);
        let bad = AblationSpec { ensemble: "e".into(), replace: "z".into(), with: vec![] };
        assert!(bad.expand(&base).is_err());
    }

    fn ballot() -> impl Strategy<Value = Ballot> {
        prop_oneof![Just(N), (0usize..5).prop_map(|i| Ballot::Valid(Letter::new(i).unwrap()))]
    }

    proptest! {
        #[test]
        fn vote_ignores_member_order(a in ballot(), b in ballot(), c in ballot()) {
            let base = ensemble_vote([a, b, c]);
            for perm in [[a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                prop_assert_eq!(ensemble_vote(perm), base);
            }
        }

        #[test]
        fn synchronized_failure_implies_wrong_vote(a in ballot(), b in ballot(), c in ballot(), correct in 0usize..5) {
            let y = Letter::new(correct).unwrap();
            if synchronized_failure([a, b, c], y) {
                let (answer, _) = ensemble_vote([a, b, c]);
                prop_assert_eq!(answer, a);
                prop_assert_ne!(answer, Ballot::Valid(y));
            }
        }
    }
}
