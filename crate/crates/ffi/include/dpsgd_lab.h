#ifndef DPSGD_LAB_H
#define DPSGD_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DlActivation {
  DL_ACTIVATION_RELU = 0,
  DL_ACTIVATION_BOUNDED_RELU = 1,
  DL_ACTIVATION_TANH = 2,
} DlActivation;

typedef enum DlArch {
  DL_ARCH_MNIST_CNN = 0,
  DL_ARCH_CIFAR10_CNN = 1,
} DlArch;

/**
 * Result code of every fallible call.
 */
typedef enum DlStatus {
  DL_STATUS_OK = 0,
  DL_STATUS_NULL_POINTER = 1,
  DL_STATUS_INVALID_ARGUMENT = 2,
  DL_STATUS_DIMENSION = 3,
  DL_STATUS_CONFIG = 4,
  DL_STATUS_STATE = 5,
  DL_STATUS_RUNTIME = 6,
  DL_STATUS_FORMAT = 7,
  DL_STATUS_IO = 8,
  DL_STATUS_PANIC = 9,
} DlStatus;

/**
 * Ordered record of subsampled Gaussian phases.
 */
typedef struct DlLedger DlLedger;

/**
 * A built network with its parameters.
 */
typedef struct DlModel DlModel;

/**
 * Seeded deterministic random stream.
 */
typedef struct DlRng DlRng;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator. Passing a null `buf`
 * only queries the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t dl_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dl_version(void);

/**
 * Per-sample clipping scale `min(1, c / norm)`.
 */
double dl_clip_factor(double norm, double c);

/**
 * Epsilon of one phase of `steps` subsampled Gaussian steps, and the RDP
 * order that attains it.
 *
 * # Safety
 * `epsilon` and `order` must be valid for writes.
 */
enum DlStatus dl_epsilon_for(double q,
                             double sigma,
                             uint64_t steps,
                             double delta,
                             double *epsilon,
                             double *order);

/**
 * # Safety
 * `out` must be valid for writes. The handle is released with
 * [`dl_ledger_free`].
 */
enum DlStatus dl_ledger_new(double delta, struct DlLedger **out);

/**
 * # Safety
 * `ledger` must be null or a handle from [`dl_ledger_new`] not yet freed.
 */
void dl_ledger_free(struct DlLedger *ledger);

/**
 * # Safety
 * `ledger` must be a live handle.
 */
enum DlStatus dl_ledger_push_phase(struct DlLedger *ledger, double q, double sigma, uint64_t steps);

/**
 * # Safety
 * `ledger` must be a live handle.
 */
size_t dl_ledger_phase_count(const struct DlLedger *ledger);

/**
 * Epsilon spent so far at the ledger's delta.
 *
 * # Safety
 * `ledger` must be a live handle; `epsilon` and `order` valid for writes.
 */
enum DlStatus dl_ledger_epsilon(const struct DlLedger *ledger, double *epsilon, double *order);

/**
 * The handle is released with [`dl_rng_free`].
 */
struct DlRng *dl_rng_new(uint64_t seed);

/**
 * # Safety
 * `rng` must be null or a handle from [`dl_rng_new`] not yet freed.
 */
void dl_rng_free(struct DlRng *rng);

/**
 * Uniform draw in `[0, 1)`; NaN for a null handle.
 *
 * # Safety
 * `rng` must be null or a live handle.
 */
double dl_rng_next_f64(struct DlRng *rng);

/**
 * Standard normal draw; NaN for a null handle.
 *
 * # Safety
 * `rng` must be null or a live handle.
 */
double dl_rng_standard_normal(struct DlRng *rng);

/**
 * Build a freshly initialized model. `bound` is read only for
 * [`DlActivation::BoundedRelu`].
 *
 * # Safety
 * `out` must be valid for writes. The handle is released with
 * [`dl_model_free`].
 */
enum DlStatus dl_model_new(enum DlArch arch,
                           enum DlActivation activation,
                           double bound,
                           uint64_t seed,
                           struct DlModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`dl_model_new`] not yet freed.
 */
void dl_model_free(struct DlModel *model);

/**
 * Number of trainable parameters; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dl_model_num_params(const struct DlModel *model);

/**
 * Values per input sample (`C * H * W`); 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dl_model_input_len(const struct DlModel *model);

/**
 * Number of output classes; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dl_model_num_classes(const struct DlModel *model);

/**
 * Class probabilities for `n` samples laid out row-major in `input`
 * (`n * dl_model_input_len` values). Writes `n * dl_model_num_classes`
 * values to `probs`.
 *
 * # Safety
 * `input` must be valid for `n * input_len` reads and `probs` for
 * `n * num_classes` writes.
 */
enum DlStatus dl_model_predict(const struct DlModel *model,
                               const double *input,
                               size_t n,
                               double *probs);

/**
 * Execute one experiment described by TOML text, the same format the
 * `dpsgd-lab run` command reads. `data_dir` is used unless the config
 * names its own.
 *
 * # Safety
 * Both arguments must be valid NUL-terminated strings.
 */
enum DlStatus dl_run_config(const char *config_toml, const char *data_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPSGD_LAB_H */
