#ifndef MBAF_H
#define MBAF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an API call; zero means success.
 */
typedef enum MbafStatus {
  MBAF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MBAF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MBAF_STATUS_INVALID_UTF8 = 2,
  MBAF_STATUS_CONFIG = 3,
  MBAF_STATUS_DOMAIN = 4,
  MBAF_STATUS_CONTRACT = 5,
  MBAF_STATUS_PROTOCOL = 6,
  MBAF_STATUS_STATE = 7,
  /**
   * Checkpoint version or magic mismatch.
   */
  MBAF_STATUS_VERSION = 8,
  MBAF_STATUS_NUMERIC = 9,
  MBAF_STATUS_IO = 10,
  /**
   * A panic was caught at the boundary.
   */
  MBAF_STATUS_PANIC = 11,
} MbafStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct MbafConfig MbafConfig;

/**
 * Opaque trained model loaded from a checkpoint.
 */
typedef struct MbafModel MbafModel;

/**
 * One block-error measurement.
 */
typedef struct MbafBlerResult {
  double snr_db;
  /**
   * Sum rate in bits per channel use.
   */
  double rate;
  /**
   * Block-error rate pooled over users.
   */
  double bler;
  /**
   * 95% confidence bounds on `bler`.
   */
  double ci_low;
  double ci_high;
  /**
   * Episodes actually simulated.
   */
  uint64_t trials;
  /**
   * Block errors per user; index 1 is zero for single-user models.
   */
  uint64_t block_errors[2];
} MbafBlerResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message for the most recent failure on this thread; empty
 * before the first failure. The pointer is invalidated by the next call
 * into the library from the same thread.
 */
const char *mbaf_last_error(void);

/**
 * Builds a named preset configuration (`"paper"` or `"desk"`).
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MbafStatus mbaf_config_preset(const char *name, struct MbafConfig **out);

/**
 * Loads and validates a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MbafStatus mbaf_config_load(const char *path, struct MbafConfig **out);

/**
 * Overrides the master seed.
 *
 * # Safety
 * `config` must be a live handle from this library.
 */
enum MbafStatus mbaf_config_set_seed(struct MbafConfig *config, uint64_t seed);

/**
 * Releases a configuration handle; null is ignored.
 *
 * # Safety
 * `config` must be null or a live handle from this library.
 */
void mbaf_config_free(struct MbafConfig *config);

/**
 * Runs the full training loop and writes the checkpoint to `checkpoint`.
 * `train_log` may be null to discard the CSV log.
 *
 * # Safety
 * `config` must be a live handle; the paths must be NUL-terminated strings.
 */
enum MbafStatus mbaf_train(const struct MbafConfig *config,
                           const char *checkpoint,
                           const char *train_log);

/**
 * Loads a trained checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MbafStatus mbaf_model_load(const char *path, struct MbafModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
void mbaf_model_free(struct MbafModel *model);

/**
 * Estimates the block-error rate of a trained model at one SNR.
 *
 * # Safety
 * `model` must be a live handle; `out` must be a valid pointer.
 */
enum MbafStatus mbaf_eval(const struct MbafModel *model,
                          double snr_db,
                          uint64_t trials,
                          uint64_t seed,
                          struct MbafBlerResult *out);

/**
 * Two-user sum capacity in bits per channel use at the given total SNR.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MbafStatus mbaf_sum_capacity(double snr_total, double *out);

/**
 * Finite-blocklength normal-approximation rate at blocklength `n`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MbafStatus mbaf_normal_approx_rate(uint32_t n, double snr_linear, double epsilon, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBAF_H */
