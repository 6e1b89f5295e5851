#ifndef DUALVDT_H
#define DUALVDT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DVDT_STATUS_OK = 0,
  DVDT_STATUS_NULL_POINTER = 1,
  DVDT_STATUS_INVALID_ARGUMENT = 2,
  DVDT_STATUS_IO = 3,
  DVDT_STATUS_CHECKPOINT = 4,
  DVDT_STATUS_NUMERIC = 5,
  DVDT_STATUS_PANIC = 6,
} DvdtStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct DvdtModel DvdtModel;

/**
 * Sizes of a loaded model.
 */
typedef struct {
  size_t n_vars;
  size_t lookback;
  size_t horizon;
  size_t latent_dim;
} DvdtDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *dvdt_last_error(void);

/**
 * Loads a checkpoint written by `dualvdt train`. On success `*out` owns a
 * handle that must be released with [`dvdt_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
DvdtStatus dvdt_model_load(const char *path, DvdtModel **out);

/**
 * # Safety
 * `model` must come from [`dvdt_model_load`] and `out` be valid.
 */
DvdtStatus dvdt_model_dims(const DvdtModel *model, DvdtDims *out);

/**
 * Forecasts `horizon × n_vars` values (row-major, time first) from a
 * `lookback × n_vars` window, both in the units of the training data.
 *
 * # Safety
 * `lookback` must point to `lookback_len` doubles and `out` to `out_len`.
 */
DvdtStatus dvdt_model_forecast(const DvdtModel *model,
                               const double *lookback,
                               size_t lookback_len,
                               uint64_t seed,
                               double *out,
                               size_t out_len);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`dvdt_model_load`] and not be used afterwards.
 */
void dvdt_model_free(DvdtModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALVDT_H */
