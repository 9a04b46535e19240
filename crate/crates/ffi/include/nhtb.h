/* Generated by cbindgen. Do not edit. */

#ifndef NHTB_H
#define NHTB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum NhtbStatus {
  NHTB_STATUS_OK = 0,
  NHTB_STATUS_NULL_POINTER = 1,
  NHTB_STATUS_INVALID_UTF8 = 2,
  NHTB_STATUS_INVALID_PARAMETER = 3,
  NHTB_STATUS_CONFIG = 4,
  NHTB_STATUS_PRECONDITION = 5,
  NHTB_STATUS_NUMERICAL = 6,
  NHTB_STATUS_IO = 7,
  NHTB_STATUS_SERIALIZATION = 8,
  NHTB_STATUS_BUFFER_TOO_SMALL = 9,
  NHTB_STATUS_PANIC = 10,
} NhtbStatus;

// Experiment configuration.
typedef struct NhtbConfig NhtbConfig;

// Completed experiment report.
typedef struct NhtbReport NhtbReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL
// terminated, truncated to fit). Returns the untruncated length plus one.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t nhtb_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *nhtb_version(void);

// Parses a JSON experiment config.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum NhtbStatus nhtb_config_from_json(const char *json, struct NhtbConfig **out);

// Loads a bundled preset by name.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum NhtbStatus nhtb_config_preset(const char *name, struct NhtbConfig **out);

// Overrides the master seed.
//
// # Safety
// `cfg` must be a live handle.
enum NhtbStatus nhtb_config_set_seed(struct NhtbConfig *cfg, uint64_t seed);

// Serializes the config as JSON into `buf`.
//
// # Safety
// `cfg` must be a live handle; `buf` null or `len` writable bytes;
// `needed` null or writable.
enum NhtbStatus nhtb_config_to_json(const struct NhtbConfig *cfg,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

// # Safety
// `cfg` must be null or a handle not yet freed.
void nhtb_config_free(struct NhtbConfig *cfg);

// Runs the full experiment. A report is produced even when assertions
// fail; check [`nhtb_report_passed`].
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum NhtbStatus nhtb_run(const struct NhtbConfig *cfg, struct NhtbReport **out);

// 1 when every assertion passed, 0 otherwise (also for a null handle).
//
// # Safety
// `rep` must be null or a live handle.
int32_t nhtb_report_passed(const struct NhtbReport *rep);

// Expanded pairing, its direct oracle and their relative difference.
//
// # Safety
// `rep` must be a live handle; each output null or writable.
enum NhtbStatus nhtb_report_pairing(const struct NhtbReport *rep,
                                    double (*total)[2],
                                    double (*oracle)[2],
                                    double *rel_err);

// Number of atoms in the measure.
//
// # Safety
// `rep` must be null or a live handle.
size_t nhtb_report_atoms(const struct NhtbReport *rep);

// Serializes the report as JSON into `buf`.
//
// # Safety
// As for [`nhtb_config_to_json`].
enum NhtbStatus nhtb_report_to_json(const struct NhtbReport *rep,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

// Writes the run artifacts selected by the config into `dir`.
//
// # Safety
// Handles must be live; `dir` a NUL-terminated path.
enum NhtbStatus nhtb_report_write(const struct NhtbReport *rep,
                                  const struct NhtbConfig *cfg,
                                  const char *dir);

// # Safety
// `rep` must be null or a handle not yet freed.
void nhtb_report_free(struct NhtbReport *rep);

// Monte Carlo frequency of bad cubes against the analytic bound.
//
// # Safety
// Outputs must be null or writable.
enum NhtbStatus nhtb_bad_probability(size_t dim,
                                     double alpha,
                                     double d,
                                     uint32_t r,
                                     uint32_t max_excess,
                                     uint64_t trials,
                                     uint64_t seed,
                                     double *frequency,
                                     double *bound);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NHTB_H */
