//! C ABI over the safescale core.
//!
//! Every function returns a [`SafescaleStatus`]; results are written through
//! out-pointers. On failure a message is available from
//! [`safescale_last_error`] on the same thread until the next call.
//! Ballots are encoded as option indices (0 = A) with -1 for a null answer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use safescale::ballot::MAX_OPTIONS;
use safescale::benchmark::{load_benchmark_unchecked, validate_benchmark_with, ValidationOptions};
use safescale::condition::compute_max_context_budget;
use safescale::stats::variance_decomposition;
use safescale::vote::{entropy_confidence, majority_vote, robustness_correctness, BallotCounts};
use safescale::{Ballot, Benchmark, Error, Letter};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafescaleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    Schema = 5,
    EmptyBallots = 6,
    NonPositiveBudget = 7,
    Panic = 8,
    Internal = 9,
}

/// Null ballot marker.
pub const SAFESCALE_NULL_BALLOT: i32 = -1;

/// Opaque handle to a parsed benchmark.
pub struct SafescaleBenchmark {
    inner: Benchmark,
}

/// Variance shares of a model x condition grid, in percent, plus the raw
/// sums of squares.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SafescaleVariance {
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

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SafescaleStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SafescaleStatus::Io,
            Error::Malformed { .. } => SafescaleStatus::Malformed,
            Error::Schema { .. } => SafescaleStatus::Schema,
            Error::EmptyBallots => SafescaleStatus::EmptyBallots,
            Error::NonPositiveBudget { .. } => SafescaleStatus::NonPositiveBudget,
            Error::InvalidDistribution(_) | Error::Mismatch(_) | Error::Missing(_) | Error::Config(_) => {
                SafescaleStatus::InvalidArgument
            }
            _ => SafescaleStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SafescaleStatus::InvalidArgument, msg.into())
}

fn null_arg(name: &str) -> Failure {
    Failure(SafescaleStatus::NullPointer, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SafescaleStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SafescaleStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SafescaleStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null_arg(name));
    }
    out.write(value);
    Ok(())
}

fn check_option_count(option_count: u32) -> Result<usize, Failure> {
    let n = option_count as usize;
    if (1..=MAX_OPTIONS).contains(&n) {
        Ok(n)
    } else {
        Err(invalid(format!("option_count must be 1..={MAX_OPTIONS}, got {option_count}")))
    }
}

fn decode_ballot(code: i32, option_count: usize) -> Result<Ballot, Failure> {
    if code == SAFESCALE_NULL_BALLOT {
        return Ok(Ballot::Null);
    }
    usize::try_from(code)
        .ok()
        .filter(|&i| i < option_count)
        .and_then(Letter::new)
        .map(Ballot::Valid)
        .ok_or_else(|| invalid(format!("ballot {code} outside -1..{option_count}")))
}

fn encode_ballot(b: Ballot) -> i32 {
    match b {
        Ballot::Valid(l) => l.index() as i32,
        Ballot::Null => SAFESCALE_NULL_BALLOT,
    }
}

unsafe fn decode_ballots(ballots: *const i32, len: usize, option_count: u32) -> Result<Vec<Ballot>, Failure> {
    let n = check_option_count(option_count)?;
    slice(ballots, len, "ballots")?
        .iter()
        .map(|&c| decode_ballot(c, n))
        .collect()
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next safescale call on the same thread.
#[no_mangle]
pub extern "C" fn safescale_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn safescale_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Majority vote over `len` ballots. Writes the winning option index, or -1
/// when null wins or ties for the lead.
///
/// # Safety
/// `ballots` must point to `len` readable values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_majority_vote(
    ballots: *const i32,
    len: usize,
    option_count: u32,
    out: *mut i32,
) -> SafescaleStatus {
    guard(|| {
        let ballots = decode_ballots(ballots, len, option_count)?;
        let winner = majority_vote(&ballots)?;
        write(out, encode_ballot(winner), "out")
    })
}

/// Entropy confidence from per-slot counts. `counts` holds
/// `option_count + 1` entries: one per option followed by the null count.
///
/// # Safety
/// `counts` must point to `option_count + 1` readable values and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_entropy_confidence(
    counts: *const u32,
    option_count: u32,
    out: *mut f64,
) -> SafescaleStatus {
    guard(|| {
        let n = check_option_count(option_count)?;
        let counts = slice(counts, n + 1, "counts")?;
        let mut tally = BallotCounts::new(n);
        for (slot, &c) in counts.iter().enumerate() {
            let b = if slot == n { Ballot::Null } else { Ballot::Valid(Letter::new(slot).expect("slot < option_count")) };
            for _ in 0..c {
                tally.add(b);
            }
        }
        write(out, entropy_confidence(&tally)?, "out")
    })
}

/// Fraction of ballots naming the correct option.
///
/// # Safety
/// `ballots` must point to `len` readable values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_robustness_correctness(
    ballots: *const i32,
    len: usize,
    option_count: u32,
    correct: i32,
    out: *mut f64,
) -> SafescaleStatus {
    guard(|| {
        let ballots = decode_ballots(ballots, len, option_count)?;
        let correct = match decode_ballot(correct, option_count as usize)? {
            Ballot::Valid(l) => l,
            Ballot::Null => return Err(invalid("correct option cannot be null")),
        };
        write(out, robustness_correctness(&ballots, correct)?, "out")
    })
}

/// Token budget left for retrieved context in a model's window.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_max_context_budget(model_max_tokens: u64, out: *mut u64) -> SafescaleStatus {
    guard(|| write(out, compute_max_context_budget(model_max_tokens)?, "out"))
}

/// Decomposes a row-major `n_models` x `n_conditions` grid. `families[i]`
/// is an arbitrary family id for model row `i`.
///
/// # Safety
/// `values` must hold `n_models * n_conditions` readable values, `families`
/// `n_models`, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_variance_decomposition(
    values: *const f64,
    n_models: usize,
    n_conditions: usize,
    families: *const u32,
    out: *mut SafescaleVariance,
) -> SafescaleStatus {
    guard(|| {
        let cells = n_models
            .checked_mul(n_conditions)
            .ok_or_else(|| invalid("grid size overflows"))?;
        let values = slice(values, cells, "values")?;
        let families = slice(families, n_models, "families")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid values must be finite"));
        }
        let model = |i: usize| format!("m{i:06}");
        let family_map: BTreeMap<String, String> =
            families.iter().enumerate().map(|(i, f)| (model(i), f.to_string())).collect();
        let grid: BTreeMap<(String, String), f64> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| ((model(k / n_conditions), format!("c{:06}", k % n_conditions)), v))
            .collect();
        let d = variance_decomposition(&grid, &family_map)?;
        let result = SafescaleVariance {
            ss_total: d.ss_total,
            ss_family: d.ss_family,
            ss_condition: d.ss_condition,
            ss_interaction: d.ss_interaction,
            ss_residual: d.ss_residual,
            family_pct: d.family_pct,
            condition_pct: d.condition_pct,
            interaction_pct: d.interaction_pct,
            residual_pct: d.residual_pct,
        };
        write(out, result, "out")
    })
}

/// Parses a benchmark file without schema validation. Release the handle
/// with [`safescale_benchmark_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_benchmark_load(
    path: *const c_char,
    out: *mut *mut SafescaleBenchmark,
) -> SafescaleStatus {
    guard(|| {
        if path.is_null() {
            return Err(null_arg("path"));
        }
        if out.is_null() {
            return Err(null_arg("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = load_benchmark_unchecked(Path::new(path))?;
        out.write(Box::into_raw(Box::new(SafescaleBenchmark { inner })));
        Ok(())
    })
}

/// Releases a handle from [`safescale_benchmark_load`]. Null is ignored.
///
/// # Safety
/// `handle` must come from `safescale_benchmark_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn safescale_benchmark_free(handle: *mut SafescaleBenchmark) {
    if !handle.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(handle))));
    }
}

/// Number of questions in the benchmark.
///
/// # Safety
/// `handle` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_benchmark_question_count(
    handle: *const SafescaleBenchmark,
    out: *mut usize,
) -> SafescaleStatus {
    guard(|| {
        let b = handle.as_ref().ok_or_else(|| null_arg("handle"))?;
        write(out, b.inner.questions.len(), "out")
    })
}

/// Validates the benchmark. Returns `Ok` with the violation and warning
/// counts written out; a valid benchmark has zero violations. The first
/// violation, if any, is available from `safescale_last_error`.
///
/// # Safety
/// `handle` must be a live handle; both out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn safescale_benchmark_validate(
    handle: *const SafescaleBenchmark,
    require_evidence: bool,
    violations: *mut usize,
    warnings: *mut usize,
) -> SafescaleStatus {
    let mut first = None;
    let status = guard(|| {
        let b = handle.as_ref().ok_or_else(|| null_arg("handle"))?;
        let report = validate_benchmark_with(&b.inner, ValidationOptions { require_evidence });
        write(violations, report.violations.len(), "violations")?;
        write(warnings, report.warnings.len(), "warnings")?;
        first = report.violations.first().map(|v| v.to_string());
        Ok(())
    });
    if let Some(msg) = first {
        set_error(msg);
    }
    status
}
