#ifndef VDPI_H
#define VDPI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VdpiStatus {
  VDPI_STATUS_OK = 0,
  VDPI_STATUS_NULL_POINTER = 1,
  VDPI_STATUS_INVALID_ARGUMENT = 2,
  VDPI_STATUS_SHAPE = 3,
  VDPI_STATUS_IO = 4,
  VDPI_STATUS_FORMAT = 5,
  VDPI_STATUS_PREREQUISITE = 6,
  VDPI_STATUS_INTERNAL = 7,
} VdpiStatus;

// Known uniform blur with its Tikhonov δ.
typedef struct VdpiOracle VdpiOracle;

// Trained restorer (vdn plus, when needed, the frozen blur and pinv models).
typedef struct VdpiRestorer VdpiRestorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, static storage.
const char *vdpi_version(void);

// Error message of the most recent fallible call on this thread; empty if it
// succeeded. Valid until the next vdpi call on the same thread.
const char *vdpi_last_error(void);

// PSNR in dB between two planar images; luma (BT.601) unless `rgb` is nonzero.
//
// # Safety
// `a` and `b` must hold `channels·height·width` floats; `out` must be writable.
enum VdpiStatus vdpi_psnr(const float *a,
                          const float *b,
                          size_t channels,
                          size_t height,
                          size_t width,
                          int32_t rgb,
                          double *out);

// Mean SSIM on luma (11×11 Gaussian window, σ = 1.5).
//
// # Safety
// As for [`vdpi_psnr`].
enum VdpiStatus vdpi_ssim(const float *a,
                          const float *b,
                          size_t channels,
                          size_t height,
                          size_t width,
                          double *out);

// Oracle for an odd square `kernel_size²` kernel (row-major).
//
// # Safety
// `kernel` must hold `kernel_size²` doubles; `out` must be writable.
enum VdpiStatus vdpi_oracle_new(const double *kernel,
                                size_t kernel_size,
                                double delta,
                                struct VdpiOracle **out);

// Oracle for a normalised isotropic Gaussian.
//
// # Safety
// `out` must be writable.
enum VdpiStatus vdpi_oracle_gaussian(size_t kernel_size,
                                     double sigma,
                                     double delta,
                                     struct VdpiOracle **out);

// # Safety
// `o` must come from an oracle constructor and not be used afterwards.
void vdpi_oracle_free(struct VdpiOracle *o);

// Circular blur `Hx` of one `height×width` plane.
//
// # Safety
// `x` and `out` must hold `height·width` doubles.
enum VdpiStatus vdpi_oracle_blur(const struct VdpiOracle *o,
                                 const double *x,
                                 size_t height,
                                 size_t width,
                                 double *out);

// Tikhonov pseudo-inverse `H⁺y` of one plane.
//
// # Safety
// As for [`vdpi_oracle_blur`].
enum VdpiStatus vdpi_oracle_pinv(const struct VdpiOracle *o,
                                 const double *y,
                                 size_t height,
                                 size_t width,
                                 double *out);

// `r1 = ‖HH⁺Hx − Hx‖/‖Hx‖` and `r2 = ‖H⁺HH⁺x − H⁺x‖/‖H⁺x‖`.
//
// # Safety
// `x` must hold `height·width` doubles; `r1`, `r2` must be writable.
enum VdpiStatus vdpi_oracle_residuals(const struct VdpiOracle *o,
                                      const double *x,
                                      size_t height,
                                      size_t width,
                                      double *r1,
                                      double *r2);

// Opens a vdn checkpoint; `blur_path` and `pinv_path` may be null when the
// variant does not use `H⁺y`.
//
// # Safety
// Paths must be null or NUL-terminated; `out` must be writable.
enum VdpiStatus vdpi_restorer_open(const char *vdn_path,
                                   const char *blur_path,
                                   const char *pinv_path,
                                   struct VdpiRestorer **out);

// # Safety
// `r` must come from [`vdpi_restorer_open`] and not be used afterwards.
void vdpi_restorer_free(struct VdpiRestorer *r);

// Temporal window length and colour channels the restorer expects.
//
// # Safety
// All pointers must be valid.
enum VdpiStatus vdpi_restorer_shape(const struct VdpiRestorer *r, size_t *frames, size_t *channels);

// Restores the centre frame of a window of `frames` consecutive blurred
// frames, stacked as `[frames·channels][height][width]`. Writes
// `channels·height·width` values clamped to `[0, 1]`.
//
// # Safety
// `window` and `out` must have the sizes above.
enum VdpiStatus vdpi_restorer_restore(const struct VdpiRestorer *r,
                                      const float *window,
                                      size_t height,
                                      size_t width,
                                      float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VDPI_H */
