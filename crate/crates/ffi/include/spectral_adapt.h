/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SPECTRAL_ADAPT_H
#define SPECTRAL_ADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum {
  SA_STATUS_OK = 0,
  SA_STATUS_NULL_POINTER = 1,
  SA_STATUS_INVALID_ARGUMENT = 2,
  SA_STATUS_SHAPE_MISMATCH = 3,
  SA_STATUS_IO = 4,
  SA_STATUS_FORMAT = 5,
  SA_STATUS_NUMERIC = 6,
  SA_STATUS_PANIC = 7,
} SaStatus;

// Hyperspectral cube handle.
typedef struct SaCube SaCube;

// Trained model handle.
typedef struct SaModel SaModel;

typedef struct {
  double ssim;
  double sam;
  double psnr;
  double l1;
} SaMetrics;

// One value per RGB-aligned band region.
typedef struct {
  double red;
  double green;
  double blue;
} SaRegions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call from the same thread.
const char *sa_last_error_message(void);

// Reads an HSC1 cube file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
SaStatus sa_cube_read(const char *path, SaCube **out);

// Writes a cube as HSC1. Values are stored as 32-bit floats.
//
// # Safety
// `cube` must come from this library; `path` must be NUL-terminated.
SaStatus sa_cube_write(const SaCube *cube, const char *path);

// Builds a cube from planar (band-major) data of `height * width * bands`
// values and `bands` increasing wavelengths in nanometres.
//
// # Safety
// `wavelengths` and `data` must point to at least the stated number of values.
SaStatus sa_cube_new(size_t height,
                     size_t width,
                     size_t bands,
                     const double *wavelengths,
                     const double *data,
                     SaCube **out);

// # Safety
// `cube` must come from this library; the outputs must be writable.
SaStatus sa_cube_dims(const SaCube *cube, size_t *height, size_t *width, size_t *bands);

// Copies the planar values into `out`, which must hold exactly
// `height * width * bands` entries.
//
// # Safety
// `cube` must come from this library; `out` must have room for `len` values.
SaStatus sa_cube_data(const SaCube *cube, double *out, size_t len);

// # Safety
// `cube` must come from this library and not be used afterwards. Null is a no-op.
void sa_cube_free(SaCube *cube);

// SSIM, SAM (radians), PSNR (dB, peak 1) and L1 of `pred` against `gt`.
//
// # Safety
// Both cubes must come from this library; `out` must be writable.
SaStatus sa_metrics(const SaCube *pred, const SaCube *gt, SaMetrics *out);

// Spectral density of each band region of `cube`, in radians.
//
// # Safety
// `cube` must come from this library; `out` must be writable.
SaStatus sa_spectral_density(const SaCube *cube, SaRegions *out);

// Per-channel masking ratios in `[r_min, r_max]` from region densities.
//
// # Safety
// `density` must be readable and `out` writable.
SaStatus sa_masking_ratios(const SaRegions *density, double r_min, double r_max, SaRegions *out);

// Loads a checkpoint written by the `train` command.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
SaStatus sa_model_load(const char *path, SaModel **out);

// Number of output bands of `model`.
//
// # Safety
// `model` must come from this library; `bands` must be writable.
SaStatus sa_model_bands(const SaModel *model, size_t *bands);

// Reconstructs a cube from a planar RGB image of `3 * height * width` values
// in `[0, 1]`. `wavelengths` labels the model's output bands.
//
// # Safety
// `model` must come from this library; `rgb` and `wavelengths` must hold the
// stated number of values; `out` must be writable.
SaStatus sa_model_predict(const SaModel *model,
                          const double *rgb,
                          size_t height,
                          size_t width,
                          const double *wavelengths,
                          size_t bands,
                          SaCube **out);

// # Safety
// `model` must come from this library and not be used afterwards. Null is a no-op.
void sa_model_free(SaModel *model);

// ATGP over a row-major `rows x cols` matrix; writes `k` row indices in
// selection order.
//
// # Safety
// `data` must hold `rows * cols` values and `indices` room for `k`.
SaStatus sa_atgp(const double *data, size_t rows, size_t cols, size_t k, size_t *indices);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECTRAL_ADAPT_H */
