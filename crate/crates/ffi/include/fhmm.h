#ifndef FHMM_H
#define FHMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Zero is success.
typedef enum FhmmStatus {
  FHMM_STATUS_OK = 0,
  FHMM_STATUS_NULL_ARGUMENT = 1,
  FHMM_STATUS_INVALID_ARGUMENT = 2,
  FHMM_STATUS_DIMENSION_MISMATCH = 3,
  FHMM_STATUS_PARSE = 4,
  FHMM_STATUS_IO = 5,
  FHMM_STATUS_VERSION = 6,
  FHMM_STATUS_NUMERICAL = 7,
  FHMM_STATUS_TOO_MANY_CHAINS = 8,
  FHMM_STATUS_PANIC = 9,
} FhmmStatus;

// Opaque model handle.
typedef struct FhmmModel FhmmModel;

// Options for [`fhmm_train_svi`]; start from [`fhmm_train_options_default`].
typedef struct FhmmTrainOptions {
  size_t chains;
  // Window span (even); each window covers `dt + 1` rows.
  size_t dt;
  size_t n_minibatch;
  size_t iterations;
  double learning_rate;
  // Width of the single hidden layer.
  size_t hidden;
  uint64_t seed;
  // Wall-clock limit in seconds; zero or negative means none.
  double budget_seconds;
} FhmmTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *fhmm_last_error(void);

// Library version as a static nul-terminated string.
const char *fhmm_version(void);

// Builds a model from raw parameters.
//
// `w` is `(chains + 1) × dim` with the bias last, `l` is the full `dim × dim`
// lower-triangular factor and `trans` holds four entries per chain
// (`p00 p01 p10 p11`).
//
// # Safety
// Buffers must hold the stated number of doubles; `out` must be writable.
enum FhmmStatus fhmm_model_new(size_t chains,
                               size_t dim,
                               const double *w,
                               const double *l,
                               const double *trans,
                               struct FhmmModel **out);

// # Safety
// `model` must come from this library and not be used afterwards. Null is a no-op.
void fhmm_model_free(struct FhmmModel *model);

// # Safety
// `file` must be a nul-terminated path; `out` must be writable.
enum FhmmStatus fhmm_model_load(const char *file, struct FhmmModel **out);

// # Safety
// `model` must be a live handle; `file` a nul-terminated path.
enum FhmmStatus fhmm_model_save(const struct FhmmModel *model, const char *file);

// Number of chains, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t fhmm_model_chains(const struct FhmmModel *model);

// Observation dimension, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t fhmm_model_dim(const struct FhmmModel *model);

// Copies `W` (`(chains + 1) × dim`) into `w_out`.
//
// # Safety
// `w_out` must hold `(chains + 1) * dim` doubles.
enum FhmmStatus fhmm_model_weights(const struct FhmmModel *model, double *w_out);

// Draws `len` steps. `states_out` may be null.
//
// # Safety
// `y_out` must hold `len * dim` doubles and `states_out`, if non-null, `len * chains`.
enum FhmmStatus fhmm_simulate(const struct FhmmModel *model,
                              size_t len,
                              uint64_t seed,
                              double *y_out,
                              uint8_t *states_out);

// Exact log-likelihood of `y` (`len × dim`) divided by `len`.
//
// # Safety
// `y` must hold `len * dim` doubles; `out` must be writable.
enum FhmmStatus fhmm_loglik_per_step(const struct FhmmModel *model,
                                     const double *y,
                                     size_t len,
                                     double *out);

// Per-time, per-chain posterior probabilities of state 1 (`len × chains`).
// Models with a recognition network use it; others run a mean-field E-step.
//
// # Safety
// `y` must hold `len * dim` doubles and `theta_out` `len * chains`.
enum FhmmStatus fhmm_infer(const struct FhmmModel *model,
                           const double *y,
                           size_t len,
                           double *theta_out);

struct FhmmTrainOptions fhmm_train_options_default(void);

// Stochastic variational training with recognition networks.
//
// # Safety
// `y` must hold `len * dim` doubles; `options` must be valid; `out` writable.
enum FhmmStatus fhmm_train_svi(const double *y,
                               size_t len,
                               size_t dim,
                               const struct FhmmTrainOptions *options,
                               struct FhmmModel **out);

// Structured mean-field EM from the same data-scaled start as the CLI.
//
// # Safety
// `y` must hold `len * dim` doubles; `out` must be writable.
enum FhmmStatus fhmm_train_smf(const double *y,
                               size_t len,
                               size_t dim,
                               size_t chains,
                               size_t outer_iterations,
                               uint64_t seed,
                               double budget_seconds,
                               struct FhmmModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FHMM_H */
