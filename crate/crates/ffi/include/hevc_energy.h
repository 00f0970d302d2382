#ifndef HEVC_ENERGY_H
#define HEVC_ENERGY_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HeStatus {
  HE_STATUS_OK = 0,
  // Malformed or invalid input (parse errors, validation failures).
  HE_STATUS_VALIDATION = 1,
  // Numeric failure: nonpositive measurement, degenerate or
  // unidentifiable fit.
  HE_STATUS_NUMERIC = 2,
  // A file could not be read.
  HE_STATUS_IO = 3,
  // A required pointer argument was null.
  HE_STATUS_NULL_POINTER = 4,
  // A string argument was not valid UTF-8.
  HE_STATUS_INVALID_UTF8 = 5,
  // The library panicked; this is a bug.
  HE_STATUS_PANIC = 6,
} HeStatus;

// Model selector for [`he_estimate`].
typedef enum HeModel {
  HE_MODEL_ACCURATE = 0,
  HE_MODEL_SIMPLIFIED = 1,
} HeModel;

// Opaque set of energy constants.
typedef struct HeConstants HeConstants;

// Opaque aggregated bitstream features.
typedef struct HeFeatures HeFeatures;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on the calling thread, or an empty
// string after a successful call. The pointer stays valid until the next
// call into this library on the same thread.
const char *he_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *he_version(void);

// Creates a handle holding the built-in constants.
//
// # Safety
// `out` must be null or valid for writing one pointer.
enum HeStatus he_constants_builtin(struct HeConstants **out);

// Loads a constants profile from a `key = value` text file.
//
// # Safety
// `path` must be null or a NUL-terminated string. `out` must be null or
// valid for writing one pointer.
enum HeStatus he_constants_load(const char *path, struct HeConstants **out);

// Reads one constant by its profile key (for example `e_tsf` or
// `e_mode_depth.dc.2`).
//
// # Safety
// `constants` must be null or a live handle, `key` null or a
// NUL-terminated string, `out` null or valid for writing one double.
enum HeStatus he_constants_get(const struct HeConstants *constants, const char *key, double *out);

// Releases a constants handle. Null is ignored.
//
// # Safety
// `constants` must be null or a handle not yet freed.
void he_constants_free(struct HeConstants *constants);

// Aggregates a feature trace file. With `lenient` nonzero, unknown record
// fields are skipped instead of rejected.
//
// # Safety
// `path` must be null or a NUL-terminated string. `out` must be null or
// valid for writing one pointer.
enum HeStatus he_features_from_trace(const char *path, int32_t lenient, struct HeFeatures **out);

// Number of prediction units in the aggregated features.
//
// # Safety
// `features` must be null or a live handle, `out` null or valid for
// writing one integer.
enum HeStatus he_features_units(const struct HeFeatures *features, uint64_t *out);

// Releases a features handle. Null is ignored.
//
// # Safety
// `features` must be null or a handle not yet freed.
void he_features_free(struct HeFeatures *features);

// Estimated decoding energy in joules.
//
// # Safety
// Handles must be null or live, `out_joules` null or valid for writing one
// double.
enum HeStatus he_estimate(const struct HeFeatures *features,
                          const struct HeConstants *constants,
                          enum HeModel model,
                          double *out_joules);

// Relative estimation error `|measured − estimated| / measured`.
//
// # Safety
// `out` must be null or valid for writing one double.
enum HeStatus he_relative_error(double measured, double estimated, double *out);

// Integrates a current log (`len` samples of time in seconds and current
// in amperes) into supply energy, corrected for the shunt dissipation.
//
// # Safety
// `times` and `currents` must each be null or point to `len` doubles.
// `out_joules` must be null or valid for writing one double.
enum HeStatus he_integrate_power(const double *times,
                                 const double *currents,
                                 size_t len,
                                 double v0_volts,
                                 double shunt_ohms,
                                 double *out_joules);

// Least-squares line through `(n_coeff, energy)` points. The slope is the
// per-coefficient energy.
//
// # Safety
// `counts` and `energies` must each be null or point to `len` elements.
// The out pointers must be null or valid for writing one double.
enum HeStatus he_fit_coeff_energy(const uint64_t *counts,
                                  const double *energies,
                                  size_t len,
                                  double *out_slope,
                                  double *out_intercept);

// Least-squares line through `(log2|value|, energy)` points. Values with
// magnitude 256 or more are skipped unless `all_values` is nonzero.
//
// # Safety
// `values` and `energies` must each be null or point to `len` elements.
// The out pointers must be null or valid for writing one double.
enum HeStatus he_fit_value_energy(const int64_t *values,
                                  const double *energies,
                                  size_t len,
                                  int32_t all_values,
                                  double *out_slope,
                                  double *out_intercept);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEVC_ENERGY_H */
