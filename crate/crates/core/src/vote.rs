//! Majority voting, entropy-normalised confidence and robustness correctness.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ballot::{Ballot, Letter, MAX_OPTIONS};
use crate::error::{Error, Result};

/// Ballot counts over the valid letters of a question plus null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BallotCounts {
    option_count: usize,
    counts: [u32; MAX_OPTIONS + 1],
}

impl BallotCounts {
    pub fn new(option_count: usize) -> Self {
        assert!(
            (1..=MAX_OPTIONS).contains(&option_count),
            "option count {option_count} outside 1..={MAX_OPTIONS}"
        );
        BallotCounts {
            option_count,
            counts: [0; MAX_OPTIONS + 1],
        }
    }

    /// Tallies ballots. Letters beyond `option_count` are counted as null.
    pub fn from_ballots(option_count: usize, ballots: &[Ballot]) -> Self {
        let mut c = BallotCounts::new(option_count);
        for &b in ballots {
            c.add(b);
        }
        c
    }

    pub fn add(&mut self, b: Ballot) {
        let slot = match b {
            Ballot::Valid(l) if l.index() < self.option_count => l.index(),
            _ => MAX_OPTIONS,
        };
        self.counts[slot] += 1;
    }

    pub fn option_count(&self) -> usize {
        self.option_count
    }

    pub fn get(&self, b: Ballot) -> u32 {
        match b {
            Ballot::Valid(l) if l.index() >= self.option_count => 0,
            _ => self.counts[b.slot()],
        }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Valid letters in alphabetical order, then null.
    pub fn ballot_space(&self) -> impl Iterator<Item = Ballot> {
        Letter::range(self.option_count)
            .map(Ballot::Valid)
            .chain(std::iter::once(Ballot::Null))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Ballot, u32)> + '_ {
        self.ballot_space().map(move |b| (b, self.get(b)))
    }

    /// Empirical distribution over the ballot space.
    pub fn distribution(&self) -> Vec<(Ballot, f64)> {
        let total = self.total() as f64;
        self.iter()
            .map(|(b, c)| (b, if total > 0.0 { c as f64 / total } else { 0.0 }))
            .collect()
    }
}

impl Serialize for BallotCounts {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<String, u32> = self.iter().map(|(b, c)| (b.to_string(), c)).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BallotCounts {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, u32>::deserialize(d)?;
        let letters = map.keys().filter(|k| *k != "null").count();
        if !(1..=MAX_OPTIONS).contains(&letters) {
            return Err(serde::de::Error::custom("ballot counts need 1..=5 letters"));
        }
        let mut out = BallotCounts::new(letters);
        for (k, v) in map {
            let slot = if k == "null" {
                MAX_OPTIONS
            } else {
                let l: Letter = k.parse().map_err(serde::de::Error::custom)?;
                if l.index() >= letters {
                    return Err(serde::de::Error::custom(format!("non-contiguous letter {k}")));
                }
                l.index()
            };
            out.counts[slot] = v;
        }
        Ok(out)
    }
}

/// Modal ballot with deterministic tie rules: a top set containing null
/// yields null; otherwise the alphabetically first tied letter wins.
pub fn majority_from_counts(counts: &BallotCounts) -> Result<Ballot> {
    let max = counts.iter().map(|(_, c)| c).max().unwrap_or(0);
    if max == 0 {
        return Err(Error::EmptyBallots);
    }
    if counts.get(Ballot::Null) == max {
        return Ok(Ballot::Null);
    }
    Ok(counts
        .iter()
        .find(|&(_, c)| c == max)
        .map(|(b, _)| b)
        .expect("max is attained"))
}

/// Majority vote over raw ballots. The option count is inferred from the
/// highest letter present, which does not affect the result.
pub fn majority_vote(ballots: &[Ballot]) -> Result<Ballot> {
    if ballots.is_empty() {
        return Err(Error::EmptyBallots);
    }
    let option_count = ballots
        .iter()
        .filter_map(|b| b.letter())
        .map(|l| l.index() + 1)
        .max()
        .unwrap_or(1);
    majority_from_counts(&BallotCounts::from_ballots(option_count, ballots))
}

/// `1 - H(p) / ln(|A| + 1)` over the empirical ballot distribution,
/// omitting zero-probability terms.
pub fn entropy_confidence(counts: &BallotCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptyBallots);
    }
    let total = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&(_, c)| c > 0)
        .map(|(_, c)| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    let norm = ((counts.option_count() + 1) as f64).ln();
    Ok((1.0 - entropy / norm).clamp(0.0, 1.0))
}

/// Fraction of ballots equal to the correct letter.
pub fn robustness_correctness(ballots: &[Ballot], correct: Letter) -> Result<f64> {
    if ballots.is_empty() {
        return Err(Error::EmptyBallots);
    }
    let hits = ballots.iter().filter(|&&b| b == Ballot::Valid(correct)).count();
    Ok(hits as f64 / ballots.len() as f64)
}

/// Per-call latency summary for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub total_seconds: f64,
    pub mean_seconds: f64,
    pub max_seconds: f64,
}

impl LatencyStats {
    pub fn from_calls(latencies: &[f64]) -> Self {
        if latencies.is_empty() {
            return LatencyStats::default();
        }
        let total: f64 = latencies.iter().sum();
        LatencyStats {
            total_seconds: total,
            mean_seconds: total / latencies.len() as f64,
            max_seconds: latencies.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// One aggregated (model, question, condition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub question_id: String,
    pub condition: String,
    pub ballot_counts: BallotCounts,
    pub final_option: Ballot,
    pub confidence: f64,
    pub k_used: u32,
    pub latency: LatencyStats,
}

impl CellResult {
    pub fn from_ballots(
        model: &str,
        question_id: &str,
        condition: &str,
        option_count: usize,
        ballots: &[Ballot],
        latencies: &[f64],
    ) -> Result<Self> {
        let counts = BallotCounts::from_ballots(option_count, ballots);
        Ok(CellResult {
            model: model.to_string(),
            question_id: question_id.to_string(),
            condition: condition.to_string(),
            final_option: majority_from_counts(&counts)?,
            confidence: entropy_confidence(&counts)?,
            k_used: counts.total(),
            ballot_counts: counts,
            latency: LatencyStats::from_calls(latencies),
        })
    }

    pub fn key(&self) -> (&str, &str, &str) {
        (&self.model, &self.question_id, &self.condition)
    }

    pub fn distribution(&self) -> Vec<(Ballot, f64)> {
        self.ballot_counts.distribution()
    }
}
