#ifndef LIAR_H
#define LIAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum LiarStatus {
  LIAR_STATUS_OK = 0,
  LIAR_STATUS_NULL_POINTER = 1,
  LIAR_STATUS_INVALID_UTF8 = 2,
  LIAR_STATUS_PANIC = 3,
  LIAR_STATUS_INDEX = 10,
  LIAR_STATUS_FORMAT = 11,
  LIAR_STATUS_CONFIG = 12,
  LIAR_STATUS_UNDERDETERMINED = 13,
  LIAR_STATUS_NUMERICAL = 14,
  LIAR_STATUS_STABILITY = 15,
  LIAR_STATUS_STRUCTURE = 16,
  LIAR_STATUS_SIZE = 17,
  LIAR_STATUS_IO = 18,
  LIAR_STATUS_JSON = 19,
} LiarStatus;

// Per-site least-squares fits.
typedef struct LiarFitReport LiarFitReport;

// Per-site kernels of a model.
typedef struct LiarKernels LiarKernels;

// A grid time series.
typedef struct LiarSeries LiarSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call into the library from this thread.
const char *liar_last_error(void);

// Releases a string returned by this library.
void liar_string_free(char *s);

// Copies `t_len` frames of `prod(dims)` values into a new series.
enum LiarStatus liar_series_new(const size_t *dims,
                                size_t ndim,
                                size_t t_len,
                                const double *values,
                                struct LiarSeries **out);

enum LiarStatus liar_series_read(const char *path, struct LiarSeries **out);

enum LiarStatus liar_series_write(const struct LiarSeries *series, const char *path);

void liar_series_free(struct LiarSeries *series);

// Number of grid dimensions, or 0 for NULL.
size_t liar_series_ndim(const struct LiarSeries *series);

// Number of frames, or 0 for NULL.
size_t liar_series_t_len(const struct LiarSeries *series);

// Writes the grid dimensions into `dims`, which holds `capacity` entries.
enum LiarStatus liar_series_dims(const struct LiarSeries *series, size_t *dims, size_t capacity);

// Copies all values (frame after frame) into `values` of length `len`,
// which must equal `t_len * prod(dims)`.
enum LiarStatus liar_series_values(const struct LiarSeries *series, double *values, size_t len);

// Random kernels on boxes of `radius`, scaled to operator norm `target_norm`.
enum LiarStatus liar_kernels_random(const size_t *dims,
                                    size_t ndim,
                                    size_t radius,
                                    size_t lags,
                                    double target_norm,
                                    uint64_t seed,
                                    struct LiarKernels **out);

// Parses kernel JSON (the format written by the `liar` tool).
enum LiarStatus liar_kernels_from_json(const char *json, struct LiarKernels **out);

// Serializes kernels; free the result with `liar_string_free`.
enum LiarStatus liar_kernels_to_json(const struct LiarKernels *kernels, char **out);

void liar_kernels_free(struct LiarKernels *kernels);

// Sum over lags of each lag operator's spectral norm.
enum LiarStatus liar_operator_norm(const struct LiarKernels *kernels, double *out);

// Simulates `t_len` frames with Gaussian noise after `burn_in` steps.
enum LiarStatus liar_simulate(const struct LiarKernels *kernels,
                              size_t t_len,
                              size_t burn_in,
                              double sigma,
                              uint64_t seed,
                              struct LiarSeries **out);

// Fits every site on a box of `radius`. Sites that cannot be identified
// are listed in the report rather than failing the call.
enum LiarStatus liar_fit_box(const struct LiarSeries *series,
                             size_t radius,
                             size_t lags,
                             struct LiarFitReport **out);

// Number of sites that failed to fit, or 0 for NULL.
size_t liar_fit_report_failures(const struct LiarFitReport *report);

// The fitted kernels; fails if any site failed.
enum LiarStatus liar_fit_report_kernels(const struct LiarFitReport *report,
                                        struct LiarKernels **out);

// Full report (coefficients, RSS, standard errors) as JSON.
enum LiarStatus liar_fit_report_to_json(const struct LiarFitReport *report, char **out);

void liar_fit_report_free(struct LiarFitReport *report);

// BIC selection over radii `0..=k0`. Writes each site's chosen radius
// into `chosen` (one entry per site, linear order). A NaN `d0` selects the
// default penalty `ln ln T`.
enum LiarStatus liar_select(const struct LiarSeries *series,
                            size_t k0,
                            size_t lags,
                            double d0,
                            size_t *chosen,
                            size_t len);

// Iterated forecast of `horizon` frames past the end of `series`.
enum LiarStatus liar_forecast(const struct LiarSeries *series,
                              const struct LiarKernels *kernels,
                              size_t horizon,
                              struct LiarSeries **out);

// Root mean squared difference of two arrays of length `len`.
enum LiarStatus liar_rmse(const double *pred, const double *truth, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIAR_H */
