#ifndef DMILO_H
#define DMILO_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DmiloStatus {
  DMILO_STATUS_OK = 0,
  DMILO_STATUS_NULL_POINTER = 1,
  DMILO_STATUS_INVALID_CONFIG = 2,
  DMILO_STATUS_SHAPE = 3,
  DMILO_STATUS_DOMAIN = 4,
  DMILO_STATUS_DIVERGENCE = 5,
  DMILO_STATUS_RUN_FAILED = 6,
  DMILO_STATUS_PANIC = 7,
} DmiloStatus;

/**
 * Forward operator handle.
 */
typedef struct DmiloOperator DmiloOperator;

/**
 * Gaussian-mixture prior handle.
 */
typedef struct DmiloPrior DmiloPrior;

/**
 * Solver result handle.
 */
typedef struct DmiloReport DmiloReport;

/**
 * Noise schedule handle.
 */
typedef struct DmiloSchedule DmiloSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dmilo_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dmilo_string_free(char *s);

/**
 * Static version string.
 */
const char *dmilo_version(void);

/**
 * Variance-preserving schedule with `steps` uniform steps on `[epsilon, t_end]`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum DmiloStatus dmilo_schedule_new(double beta0,
                                    double beta1,
                                    double epsilon,
                                    double t_end,
                                    size_t steps,
                                    struct DmiloSchedule **out);

/**
 * # Safety
 * `s` must be null or a handle from `dmilo_schedule_new` not yet freed.
 */
void dmilo_schedule_free(struct DmiloSchedule *s);

/**
 * Signal coefficient `alpha(t)` and noise coefficient `sigma(t)`.
 *
 * # Safety
 * `s` must be a live schedule handle; `alpha` and `sigma` writable.
 */
enum DmiloStatus dmilo_schedule_level(const struct DmiloSchedule *s,
                                      double t,
                                      double *alpha,
                                      double *sigma);

/**
 * Toy prior: `k` components in `R^n` with common standard deviation `tau`.
 *
 * # Safety
 * `out` must be writable.
 */
enum DmiloStatus dmilo_prior_new_toy(size_t k,
                                     size_t n,
                                     double tau,
                                     uint64_t seed,
                                     struct DmiloPrior **out);

/**
 * Prior from a JSON `prior` block (`{"K": 5, "n": 16, "tau": 0.1, ...}`).
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` writable.
 */
enum DmiloStatus dmilo_prior_from_json(const char *json, struct DmiloPrior **out);

/**
 * # Safety
 * `p` must be null or a live prior handle.
 */
void dmilo_prior_free(struct DmiloPrior *p);

/**
 * Signal dimension of the prior, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live prior handle.
 */
size_t dmilo_prior_dim(const struct DmiloPrior *p);

/**
 * Posterior mean `E[x_0 | x_t = x]` written to `out` (length `n`).
 *
 * # Safety
 * Handles must be live; `x` and `out` must hold `n` doubles.
 */
enum DmiloStatus dmilo_prior_denoise(const struct DmiloPrior *p,
                                     const struct DmiloSchedule *s,
                                     const double *x,
                                     size_t n,
                                     double t,
                                     double *out);

/**
 * Operator from a JSON `task` block for signals of length `n`.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` writable.
 */
enum DmiloStatus dmilo_operator_from_json(const char *json,
                                          size_t n,
                                          uint64_t seed,
                                          struct DmiloOperator **out);

/**
 * # Safety
 * `op` must be null or a live operator handle.
 */
void dmilo_operator_free(struct DmiloOperator *op);

/**
 * # Safety
 * `op` must be null or a live operator handle.
 */
size_t dmilo_operator_in_dim(const struct DmiloOperator *op);

/**
 * # Safety
 * `op` must be null or a live operator handle.
 */
size_t dmilo_operator_out_dim(const struct DmiloOperator *op);

/**
 * `out = A(x)`.
 *
 * # Safety
 * `op` must be live; `x` holds `n` doubles and `out` has room for `m`.
 */
enum DmiloStatus dmilo_operator_apply(const struct DmiloOperator *op,
                                      const double *x,
                                      size_t n,
                                      double *out,
                                      size_t m);

/**
 * Runs the solver described by `solver_json` (a `solver` block) with the
 * inner settings `optim_json` (an `optim` block; null for defaults).
 *
 * # Safety
 * Handles must be live; `y` holds `m` doubles; strings nul-terminated or
 * null where allowed; `out` writable.
 */
enum DmiloStatus dmilo_solve(const double *y,
                             size_t m,
                             const struct DmiloOperator *op,
                             const struct DmiloSchedule *s,
                             const struct DmiloPrior *p,
                             const char *solver_json,
                             const char *optim_json,
                             struct DmiloReport **out);

/**
 * # Safety
 * `r` must be null or a live report handle.
 */
void dmilo_report_free(struct DmiloReport *r);

/**
 * Length of the estimate, or 0 for a null handle.
 *
 * # Safety
 * `r` must be null or a live report handle.
 */
size_t dmilo_report_estimate_len(const struct DmiloReport *r);

/**
 * Copies the estimate into `out` (exactly `len` doubles).
 *
 * # Safety
 * `r` must be live; `out` must have room for `len` doubles.
 */
enum DmiloStatus dmilo_report_estimate(const struct DmiloReport *r, double *out, size_t len);

/**
 * Initial and final measurement residuals and the retained-context peak.
 *
 * # Safety
 * `r` must be live; the outputs must be writable.
 */
enum DmiloStatus dmilo_report_summary(const struct DmiloReport *r,
                                      double *residual_init,
                                      double *residual_final,
                                      size_t *context_peak);

/**
 * Full report as JSON; free with `dmilo_string_free`.
 *
 * # Safety
 * `r` must be live; `out` writable.
 */
enum DmiloStatus dmilo_report_to_json(const struct DmiloReport *r, char **out);

/**
 * Runs a whole experiment config (JSON text) in memory and returns the
 * results document as JSON; nothing is written to disk. Trial failures are
 * reported inside the document and yield `DMILO_STATUS_RUN_FAILED` with the
 * document still returned.
 *
 * # Safety
 * `config_json` must be nul-terminated; `out` writable.
 */
enum DmiloStatus dmilo_run_experiment_json(const char *config_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMILO_H */
