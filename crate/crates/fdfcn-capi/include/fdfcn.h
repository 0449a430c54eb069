/* C interface to the fdfcn segmentation engine. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum FdfcnStatus {
  FDFCN_STATUS_OK = 0,
  FDFCN_STATUS_NULL_ARGUMENT = 1,
  FDFCN_STATUS_USAGE = 2,
  FDFCN_STATUS_IO = 3,
  FDFCN_STATUS_VALIDATION = 4,
  FDFCN_STATUS_NUMERIC = 5,
  FDFCN_STATUS_PANIC = 6,
} FdfcnStatus;

/**
 * Spectral plus Cartesian coordinate volumes for one mask.
 */
typedef struct FdfcnCoords FdfcnCoords;

/**
 * A loaded model: network topology plus trained parameters.
 */
typedef struct FdfcnModel FdfcnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fdfcn_last_error(void);

/**
 * Crate version as a static nul-terminated string.
 */
const char *fdfcn_version(void);

/**
 * Loads a checkpoint file into a model handle. On success `*out` owns the
 * model; release it with [`fdfcn_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum FdfcnStatus fdfcn_model_load(const char *path, struct FdfcnModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fdfcn_model_load`] and not be freed twice.
 */
void fdfcn_model_free(struct FdfcnModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum FdfcnStatus fdfcn_model_input_edge(const struct FdfcnModel *model, uint32_t *out);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum FdfcnStatus fdfcn_model_output_edge(const struct FdfcnModel *model, uint32_t *out);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum FdfcnStatus fdfcn_model_classes(const struct FdfcnModel *model, uint32_t *out);

/**
 * Computes spectral plus Cartesian coordinates for a mask given as one byte
 * per voxel (nonzero = inside) over a `dims[0] * dims[1] * dims[2]` grid in
 * row-major order with the last axis fastest. `downsample >= 2` coarsens
 * the eigensolve grid.
 *
 * # Safety
 * `dims` must point to 3 values, `mask` to the full voxel grid, and `out`
 * must be valid.
 */
enum FdfcnStatus fdfcn_coords_compute(const uint64_t *dims,
                                      const uint8_t *mask,
                                      uint32_t downsample,
                                      struct FdfcnCoords **out);

/**
 * Releases a coordinates handle. Null is ignored.
 *
 * # Safety
 * `coords` must come from [`fdfcn_coords_compute`] and not be freed twice.
 */
void fdfcn_coords_free(struct FdfcnCoords *coords);

/**
 * Copies the three eigenvalues into `out`.
 *
 * # Safety
 * `out` must point to 3 writable doubles.
 */
enum FdfcnStatus fdfcn_coords_eigenvalues(const struct FdfcnCoords *coords, double *out);

/**
 * Copies one coordinate channel (0..3 spectral, 3..6 Cartesian) into a
 * caller buffer of `len` floats, which must equal the voxel count.
 *
 * # Safety
 * `out` must point to `len` writable floats.
 */
enum FdfcnStatus fdfcn_coords_channel(const struct FdfcnCoords *coords,
                                      uint32_t channel,
                                      float *out,
                                      uintptr_t len);

/**
 * Segments a raw intensity volume (row-major, last axis fastest, raw
 * 0..255 scale) and writes one `u16` class label per voxel into
 * `out_labels`.
 *
 * # Safety
 * `dims` must point to 3 values; `intensity` and `out_labels` to full
 * voxel grids; `coords` must match the volume dims.
 */
enum FdfcnStatus fdfcn_segment(const struct FdfcnModel *model,
                               const uint64_t *dims,
                               const float *intensity,
                               const struct FdfcnCoords *coords,
                               uint32_t batch,
                               uint16_t *out_labels);

/**
 * Dice overlap of one class between two label buffers of `len` voxels.
 * Both-empty yields 1.0.
 *
 * # Safety
 * `pred` and `reference` must point to `len` labels; `out` must be valid.
 */
enum FdfcnStatus fdfcn_dice(const uint16_t *pred,
                            const uint16_t *reference,
                            uintptr_t len,
                            uint16_t class_,
                            double *out);

/**
 * Intersection over union of one class between two label buffers.
 *
 * # Safety
 * `pred` and `reference` must point to `len` labels; `out` must be valid.
 */
enum FdfcnStatus fdfcn_iou(const uint16_t *pred,
                           const uint16_t *reference,
                           uintptr_t len,
                           uint16_t class_,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
