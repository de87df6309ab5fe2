use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use safescale::benchmark::{label_density_report, load_benchmark_unchecked, validate_benchmark_with, ValidationOptions};
use safescale::condition::{ConditionKind, ConditionSpec};
use safescale::config::RunConfig;
use safescale::runner::{execute, Command, RunContext, RunSummary};
use safescale::stats::MODEL_AVERAGE;
use safescale::Error;

#[derive(Parser)]
#[command(name = "safescale", version, about = "Safety-focused evaluation of LLM panels on labelled multiple-choice benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a benchmark file against the schema; exits 1 on violations.
    Validate {
        path: PathBuf,
        /// Also require clean and conflict evidence on every question.
        #[arg(long)]
        require_evidence: bool,
        /// Print label densities split by source subset.
        #[arg(long)]
        by_source: bool,
    },
    /// Run the main grid, then every configured analysis and experiment.
    Run(RunArgs),
    /// Rescore stored main-grid cells.
    Score(RunArgs),
    /// Rescore stored cells and compute statistics.
    Analyze(RunArgs),
    /// Evaluate configured ensembles from stored cells.
    Ensembles(RunArgs),
    /// Run the single versus self-consistency comparison.
    Sc(RunArgs),
    /// Regenerate every report from stored cells.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output root; results go under <out>/<run_id>/.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these condition labels, or add a condition by kind.
    #[arg(long = "condition")]
    conditions: Vec<String>,
    /// Context directory override as LABEL=DIR.
    #[arg(long = "context-dir")]
    context_dirs: Vec<String>,
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) -> anyhow::Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let cwd = std::env::current_dir().context("reading the working directory")?;
    for entry in &args.context_dirs {
        let (label, dir) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--context-dir expects LABEL=DIR, got {entry}"))?;
        let dir = cwd.join(dir);
        match cfg.conditions.iter_mut().find(|c| c.label() == label) {
            Some(c) => c.context_dir = Some(dir),
            None => {
                let kind: ConditionKind = label.parse().map_err(|e| anyhow!("{e}"))?;
                cfg.conditions.push(ConditionSpec::new(kind).with_context_dir(dir));
            }
        }
    }
    if !args.conditions.is_empty() {
        for wanted in &args.conditions {
            if !cfg.conditions.iter().any(|c| c.label() == wanted) {
                let kind: ConditionKind = wanted
                    .parse()
                    .map_err(|_| anyhow!("unknown condition {wanted}"))?;
                cfg.conditions.push(ConditionSpec::new(kind));
            }
        }
        cfg.conditions.retain(|c| args.conditions.iter().any(|w| w == c.label()));
    }
    Ok(())
}

fn validate(path: &Path, require_evidence: bool, by_source: bool) -> anyhow::Result<ExitCode> {
    let benchmark = match load_benchmark_unchecked(path) {
        Ok(b) => b,
        Err(e @ Error::Schema { .. }) => {
            eprintln!("violation: {e}");
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e.into()),
    };
    let report = validate_benchmark_with(&benchmark, ValidationOptions { require_evidence });
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    let density = label_density_report(&benchmark, by_source);
    println!("{}", serde_json::to_string_pretty(&density)?);
    if report.is_valid() {
        eprintln!("{}: {} questions, valid", path.display(), benchmark.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{}: {} violation(s)", path.display(), report.violations.len());
        Ok(ExitCode::from(1))
    }
}

fn print_summary(s: &RunSummary) {
    println!("run directory: {}", s.run_dir.display());
    if let Some(c) = &s.completeness {
        println!(
            "cells: {} expected, {} completed, {} failed, {} unevaluable ({} resumed)",
            c.expected, c.completed, c.failed, c.unevaluable, s.resumed
        );
    }
    for r in s.metrics.iter().filter(|r| r.model == MODEL_AVERAGE) {
        println!(
            "{:<20} accuracy {:6.2}  high-risk {:6.2}  unsafe {:6.2}  contradiction {:6.2}",
            r.condition, r.accuracy, r.high_risk, r.unsafe_, r.contradiction
        );
    }
    for r in &s.ensemble_rows {
        println!("ensemble {:<24} {:<20} accuracy {:6.2}", r.ensemble, r.condition, r.accuracy);
    }
    for r in s.sc_rows.iter().filter(|r| r.metrics.model == MODEL_AVERAGE) {
        println!("{:<18} {:<20} accuracy {:6.2}", r.regime, r.metrics.condition, r.metrics.accuracy);
    }
    println!("{} files indexed", s.index.len());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Validate {
            path,
            require_evidence,
            by_source,
        } => validate(&path, require_evidence, by_source),
        Cmd::Run(a) => run(a, Command::Run),
        Cmd::Score(a) => run(a, Command::Score),
        Cmd::Analyze(a) => run(a, Command::Analyze),
        Cmd::Ensembles(a) => run(a, Command::Ensembles),
        Cmd::Sc(a) => run(a, Command::SelfConsistency),
        Cmd::Report(a) => run(a, Command::Report),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: RunArgs, command: Command) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    apply_overrides(&mut cfg, &args)?;
    if cfg.conditions.is_empty() {
        bail!("no conditions selected");
    }
    let ctx = RunContext::prepare(cfg, &args.out)?;
    let summary = execute(&ctx, command)?;
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}
