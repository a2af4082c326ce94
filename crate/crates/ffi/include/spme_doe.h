#ifndef SPME_DOE_H
#define SPME_DOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of identifiable parameters.
 */
#define SPME_DOE_PARAMETER_COUNT 7

typedef enum SpmeDoeStatus {
  SPME_DOE_STATUS_OK = 0,
  SPME_DOE_STATUS_NULL_POINTER = 1,
  SPME_DOE_STATUS_INVALID_ARGUMENT = 2,
  SPME_DOE_STATUS_CONFIG = 3,
  SPME_DOE_STATUS_NUMERICAL = 4,
  SPME_DOE_STATUS_SAFETY = 5,
  SPME_DOE_STATUS_IO = 6,
  SPME_DOE_STATUS_BUFFER_TOO_SMALL = 7,
  SPME_DOE_STATUS_PANIC = 8,
} SpmeDoeStatus;

typedef enum SpmeDoeMethod {
  SPME_DOE_METHOD_OPTIMAL_DOE = 0,
  SPME_DOE_METHOD_CC_DISCHARGE = 1,
  SPME_DOE_METHOD_MULTISTEP = 2,
} SpmeDoeMethod;

typedef enum SpmeDoeParams {
  SPME_DOE_PARAMS_TRUTH = 0,
  SPME_DOE_PARAMS_INITIAL = 1,
} SpmeDoeParams;

/**
 * Finished campaign.
 */
typedef struct SpmeDoeCampaign SpmeDoeCampaign;

/**
 * Loaded configuration.
 */
typedef struct SpmeDoeConfig SpmeDoeConfig;

/**
 * Per-experiment figures copied out of a campaign.
 */
typedef struct SpmeDoeExperiment {
  size_t index;
  /**
   * 0 completed, 1 failed, 2 estimation failed.
   */
  int32_t status;
  double estimate[SPME_DOE_PARAMETER_COUNT];
  double distance;
  /**
   * Scaled variances; NaN when no metrics were computed.
   */
  double variances[SPME_DOE_PARAMETER_COUNT];
  double trace;
  double kappa;
  double gamma;
} SpmeDoeExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t spme_doe_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spme_doe_version(void);

/**
 * The built-in identification configuration.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum SpmeDoeStatus spme_doe_config_builtin(struct SpmeDoeConfig **out);

/**
 * Loads and validates a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum SpmeDoeStatus spme_doe_config_load(const char *path, struct SpmeDoeConfig **out);

/**
 * Parses configuration text; `name` is used in diagnostics.
 *
 * # Safety
 * `toml` and `name` must be NUL-terminated strings and `out` a valid handle slot.
 */
enum SpmeDoeStatus spme_doe_config_parse(const char *toml,
                                         const char *name,
                                         struct SpmeDoeConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not yet freed.
 */
void spme_doe_config_free(struct SpmeDoeConfig *cfg);

/**
 * Overrides the campaign method, experiment count and noise seed.
 *
 * # Safety
 * `cfg` must be a live configuration handle.
 */
enum SpmeDoeStatus spme_doe_config_set_campaign(struct SpmeDoeConfig *cfg,
                                                enum SpmeDoeMethod method,
                                                size_t n_experiments,
                                                uint64_t seed);

/**
 * Sample period of the configuration in s.
 *
 * # Safety
 * `cfg` must be a live configuration handle and `t_s` writable.
 */
enum SpmeDoeStatus spme_doe_config_sample_period(const struct SpmeDoeConfig *cfg, double *t_s);

/**
 * Simulates the SPMe from the configured initial state. Sample k of
 * `voltages` is the terminal voltage at the end of interval k.
 *
 * # Safety
 * `inputs` and `voltages` must each point to `n` elements.
 */
enum SpmeDoeStatus spme_doe_simulate(const struct SpmeDoeConfig *cfg,
                                     enum SpmeDoeParams params,
                                     const double *inputs,
                                     size_t n,
                                     double *voltages);

/**
 * Runs a campaign. Blocks until every experiment has finished.
 *
 * # Safety
 * `cfg` must be a live configuration handle and `out` a valid handle slot.
 */
enum SpmeDoeStatus spme_doe_campaign_run(const struct SpmeDoeConfig *cfg,
                                         struct SpmeDoeCampaign **out);

/**
 * # Safety
 * `campaign` must be null or a handle from this library, not yet freed.
 */
void spme_doe_campaign_free(struct SpmeDoeCampaign *campaign);

/**
 * Number of experiments recorded, including failed ones.
 *
 * # Safety
 * `campaign` must be a live handle and `count` writable.
 */
enum SpmeDoeStatus spme_doe_campaign_len(const struct SpmeDoeCampaign *campaign, size_t *count);

/**
 * Copies experiment `i` (0-based) into `out`.
 *
 * # Safety
 * `campaign` must be a live handle and `out` writable.
 */
enum SpmeDoeStatus spme_doe_campaign_experiment(const struct SpmeDoeCampaign *campaign,
                                                size_t i,
                                                struct SpmeDoeExperiment *out);

/**
 * Writes the campaign summary as TOML into `buf`. `written` receives the
 * required size including the NUL; BUFFER_TOO_SMALL is returned when `len`
 * is short, so a null `buf` can be used to query the size.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes; `written` must be writable.
 */
enum SpmeDoeStatus spme_doe_campaign_summary(const struct SpmeDoeCampaign *campaign,
                                             char *buf,
                                             size_t len,
                                             size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPME_DOE_H */
