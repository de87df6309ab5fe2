#ifndef SAFESCALE_H
#define SAFESCALE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Null ballot marker.
 */
#define SAFESCALE_NULL_BALLOT -1

/**
 * Result codes shared by every entry point.
 */
typedef enum SafescaleStatus {
  SAFESCALE_STATUS_OK = 0,
  SAFESCALE_STATUS_NULL_POINTER = 1,
  SAFESCALE_STATUS_INVALID_ARGUMENT = 2,
  SAFESCALE_STATUS_IO = 3,
  SAFESCALE_STATUS_MALFORMED = 4,
  SAFESCALE_STATUS_SCHEMA = 5,
  SAFESCALE_STATUS_EMPTY_BALLOTS = 6,
  SAFESCALE_STATUS_NON_POSITIVE_BUDGET = 7,
  SAFESCALE_STATUS_PANIC = 8,
  SAFESCALE_STATUS_INTERNAL = 9,
} SafescaleStatus;

/**
 * Opaque handle to a parsed benchmark.
 */
typedef struct SafescaleBenchmark SafescaleBenchmark;

/**
 * Variance shares of a model x condition grid, in percent, plus the raw
 * sums of squares.
 */
typedef struct SafescaleVariance {
  double ss_total;
  double ss_family;
  double ss_condition;
  double ss_interaction;
  double ss_residual;
  double family_pct;
  double condition_pct;
  double interaction_pct;
  double residual_pct;
} SafescaleVariance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next safescale call on the same thread.
 */
const char *safescale_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *safescale_version(void);

/**
 * Majority vote over `len` ballots. Writes the winning option index, or -1
 * when null wins or ties for the lead.
 *
 * # Safety
 * `ballots` must point to `len` readable values and `out` must be writable.
 */
enum SafescaleStatus safescale_majority_vote(const int32_t *ballots,
                                             size_t len,
                                             uint32_t option_count,
                                             int32_t *out);

/**
 * Entropy confidence from per-slot counts. `counts` holds
 * `option_count + 1` entries: one per option followed by the null count.
 *
 * # Safety
 * `counts` must point to `option_count + 1` readable values and `out` must
 * be writable.
 */
enum SafescaleStatus safescale_entropy_confidence(const uint32_t *counts,
                                                  uint32_t option_count,
                                                  double *out);

/**
 * Fraction of ballots naming the correct option.
 *
 * # Safety
 * `ballots` must point to `len` readable values and `out` must be writable.
 */
enum SafescaleStatus safescale_robustness_correctness(const int32_t *ballots,
                                                      size_t len,
                                                      uint32_t option_count,
                                                      int32_t correct,
                                                      double *out);

/**
 * Token budget left for retrieved context in a model's window.
 *
 * # Safety
 * `out` must be writable.
 */
enum SafescaleStatus safescale_max_context_budget(uint64_t model_max_tokens, uint64_t *out);

/**
 * Decomposes a row-major `n_models` x `n_conditions` grid. `families[i]`
 * is an arbitrary family id for model row `i`.
 *
 * # Safety
 * `values` must hold `n_models * n_conditions` readable values, `families`
 * `n_models`, and `out` must be writable.
 */
enum SafescaleStatus safescale_variance_decomposition(const double *values,
                                                      size_t n_models,
                                                      size_t n_conditions,
                                                      const uint32_t *families,
                                                      struct SafescaleVariance *out);

/**
 * Parses a benchmark file without schema validation. Release the handle
 * with [`safescale_benchmark_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` must be writable.
 */
enum SafescaleStatus safescale_benchmark_load(const char *path, struct SafescaleBenchmark **out);

/**
 * Releases a handle from [`safescale_benchmark_load`]. Null is ignored.
 *
 * # Safety
 * `handle` must come from `safescale_benchmark_load` and not be used again.
 */
void safescale_benchmark_free(struct SafescaleBenchmark *handle);

/**
 * Number of questions in the benchmark.
 *
 * # Safety
 * `handle` must be a live handle and `out` must be writable.
 */
enum SafescaleStatus safescale_benchmark_question_count(const struct SafescaleBenchmark *handle,
                                                        size_t *out);

/**
 * Validates the benchmark. Returns `Ok` with the violation and warning
 * counts written out; a valid benchmark has zero violations. The first
 * violation, if any, is available from `safescale_last_error`.
 *
 * # Safety
 * `handle` must be a live handle; both out-pointers must be writable.
 */
enum SafescaleStatus safescale_benchmark_validate(const struct SafescaleBenchmark *handle,
                                                  bool require_evidence,
                                                  size_t *violations,
                                                  size_t *warnings);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFESCALE_H */
