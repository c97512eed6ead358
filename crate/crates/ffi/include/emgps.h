#ifndef EMGPS_H
#define EMGPS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. `EMGPS_STATUS_OK` is zero.
 */
typedef enum EmgpsStatus {
  EMGPS_STATUS_OK = 0,
  EMGPS_STATUS_NULL_POINTER = 1,
  EMGPS_STATUS_INVALID_UTF8 = 2,
  EMGPS_STATUS_DOMAIN = 3,
  EMGPS_STATUS_CONFIG = 4,
  EMGPS_STATUS_DIMENSION = 5,
  EMGPS_STATUS_NUMERICAL = 6,
  EMGPS_STATUS_FIT = 7,
  EMGPS_STATUS_INFORMATION_BOUND = 8,
  EMGPS_STATUS_NON_FINITE_LOSS = 9,
  EMGPS_STATUS_MISSING = 10,
  EMGPS_STATUS_IO = 11,
  EMGPS_STATUS_JSON = 12,
  EMGPS_STATUS_CSV = 13,
  EMGPS_STATUS_PANIC = 14,
} EmgpsStatus;

/*
 Opaque experiment configuration.
 */
typedef struct EmgpsConfig EmgpsConfig;

/*
 Opaque trained global policy.
 */
typedef struct EmgpsPolicy EmgpsPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *emgps_version(void);

/*
 Message of the last failure on this thread, or NULL. Valid until the next
 failing call on the same thread.
 */
const char *emgps_last_error_message(void);

/*
 # Safety
 `s` must be NULL or a string returned by this library.
 */
void emgps_string_free(char *s);

/*
 # Safety
 `out` must be a valid pointer to write the handle to.
 */
enum EmgpsStatus emgps_config_default(struct EmgpsConfig **out);

/*
 Parses a JSON configuration; omitted fields take their defaults.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EmgpsStatus emgps_config_from_json(const char *json, struct EmgpsConfig **out);

/*
 # Safety
 `cfg` must be a live handle and `out` a valid pointer.
 */
enum EmgpsStatus emgps_config_to_json(const struct EmgpsConfig *cfg, char **out);

/*
 # Safety
 `cfg` must be a live handle.
 */
enum EmgpsStatus emgps_config_set_seed(struct EmgpsConfig *cfg, uint64_t seed);

/*
 # Safety
 `cfg` must be NULL or a handle not yet freed.
 */
void emgps_config_free(struct EmgpsConfig *cfg);

/*
 Runs the full pipeline into `out_dir`.

 # Safety
 `cfg` must be a live handle and `out_dir` a NUL-terminated path.
 */
enum EmgpsStatus emgps_run_pipeline(const struct EmgpsConfig *cfg, const char *out_dir);

/*
 Compares the baseline snapshot with snapshot `snapshot` (the last one when
 negative) and writes the report as JSON to `report_json`.

 # Safety
 `cfg` must be a live handle, `out_dir` a NUL-terminated path and
 `report_json` a valid pointer.
 */
enum EmgpsStatus emgps_compare(const struct EmgpsConfig *cfg,
                               const char *out_dir,
                               int64_t snapshot,
                               char **report_json);

/*
 # Safety
 `path` must be a NUL-terminated path and `out` a valid pointer.
 */
enum EmgpsStatus emgps_policy_load(const char *path, struct EmgpsPolicy **out);

/*
 Number of steps; 0 for a NULL handle.

 # Safety
 `policy` must be NULL or a live handle.
 */
size_t emgps_policy_horizon(const struct EmgpsPolicy *policy);

/*
 # Safety
 `policy` must be NULL or a live handle.
 */
size_t emgps_policy_state_dim(const struct EmgpsPolicy *policy);

/*
 # Safety
 `policy` must be NULL or a live handle.
 */
size_t emgps_policy_action_dim(const struct EmgpsPolicy *policy);

/*
 Mean action μ^L(x) for `state` (length `state_len`) into `action`
 (length `action_len`).

 # Safety
 `policy` must be a live handle; `state` and `action` must point to arrays
 of the given lengths.
 */
enum EmgpsStatus emgps_policy_action_mean(const struct EmgpsPolicy *policy,
                                          const double *state,
                                          size_t state_len,
                                          double *action,
                                          size_t action_len);

/*
 Σ^L at `step`, row-major, into `out` of length `action_dim²`.

 # Safety
 `policy` must be a live handle and `out` must point to `out_len` doubles.
 */
enum EmgpsStatus emgps_policy_action_covariance(const struct EmgpsPolicy *policy,
                                                size_t step,
                                                double *out,
                                                size_t out_len);

/*
 # Safety
 `policy` must be NULL or a handle not yet freed.
 */
void emgps_policy_free(struct EmgpsPolicy *policy);

/*
 Success decision of the configuration's criterion for a final position
 and final action, each of length 2.

 # Safety
 `cfg` must be a live handle; `position` and `action` must point to two
 doubles and `success` to a writable bool.
 */
enum EmgpsStatus emgps_success_test(const struct EmgpsConfig *cfg,
                                    const double *position,
                                    const double *action,
                                    bool *success);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMGPS_H */
