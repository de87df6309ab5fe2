//! Safety-focused evaluation harness for panels of large language models.
//!
//! The crate scores model panels on safety-annotated multiple-choice
//! benchmarks across deployment conditions (closed-book, curated evidence,
//! retrieval contexts, long contexts). Every repeated-sampling cell is reduced
//! to a modal ballot with an entropy-normalised stability score, mapped to
//! option-level safety labels, and summarised with paired bootstrap
//! statistics, variance decomposition, worst-case rankings and ensemble
//! analyses.
//!
//! Module map:
//! - [`benchmark`]: benchmark documents, validation, label density.
//! - [`condition`]: deployment conditions and prompt assembly.
//! - [`gateway`]: model specs, decoding parameters, simulated and HTTP backends.
//! - [`resolution`]: raw text to verified ballots.
//! - [`vote`]: majority vote, entropy confidence, robustness correctness.
//! - [`scoring`]: per-response outcomes, rates, dangerous overconfidence.
//! - [`stats`]: bootstrap, deltas, variance decomposition, rankings, strata.
//! - [`ensemble`]: fixed three-model ensembles.
//! - [`runner`]: experiment orchestration, persistence and reports.

pub mod ballot;
pub mod benchmark;
pub mod condition;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod gateway;
pub mod resolution;
pub mod runner;
pub mod scoring;
pub mod stats;
pub mod vote;

pub use ballot::{Ballot, Letter};
pub use benchmark::{Benchmark, OptionSafetyLabels, Question};
pub use error::{Error, Result};
