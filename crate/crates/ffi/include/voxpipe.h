#ifndef VOXPIPE_H
#define VOXPIPE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define VP_OK 0

#define VP_ERR_NULL -1

#define VP_ERR_UTF8 -2

#define VP_ERR_PANIC -3

#define VP_ERR_BUFFER -4

/**
 * Run configuration.
 */
typedef struct VpConfig VpConfig;

/**
 * Binary mask.
 */
typedef struct VpMask VpMask;

/**
 * Trained network (segmenter or classifier).
 */
typedef struct VpModel VpModel;

/**
 * Intensity volume.
 */
typedef struct VpVolume VpVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vp_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *vp_last_error(void);

/**
 * Loads a configuration. `path` may be null (defaults only); `overrides`
 * holds `n_overrides` strings of the form `key.path=value`.
 *
 * # Safety
 * Pointers must be null or valid for the stated lengths.
 */
int vp_config_load(const char *path,
                   const char *const *overrides,
                   uintptr_t n_overrides,
                   struct VpConfig **out);

/**
 * # Safety
 * `cfg` must be null or come from `vp_config_load`.
 */
void vp_config_free(struct VpConfig *cfg);

/**
 * Reads a scan NRRD and its metadata sidecar (if present).
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
int vp_volume_read(const char *path, struct VpVolume **out);

/**
 * Wraps a Hounsfield-unit array (x fastest) in head-first-supine
 * orientation.
 *
 * # Safety
 * `dims` and `spacing` must point to 3 values, `hu` to their product.
 */
int vp_volume_from_hu(const uintptr_t *dims,
                      const double *spacing,
                      const float *hu,
                      struct VpVolume **out);

/**
 * # Safety
 * `v` must be a live handle, `dims` writable for 3 values.
 */
int vp_volume_dims(const struct VpVolume *v, uintptr_t *dims);

/**
 * # Safety
 * `v` must be null or a handle from this library.
 */
void vp_volume_free(struct VpVolume *v);

/**
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
int vp_mask_read(const char *path, struct VpMask **out);

/**
 * Writes a gzip-encoded mask NRRD.
 *
 * # Safety
 * `m` must be a live handle, `path` a NUL-terminated string.
 */
int vp_mask_write(const struct VpMask *m, const char *path);

/**
 * # Safety
 * `m` must be a live handle, `dims` writable for 3 values.
 */
int vp_mask_dims(const struct VpMask *m, uintptr_t *dims);

/**
 * Number of foreground voxels.
 *
 * # Safety
 * `m` must be a live handle, `count` writable.
 */
int vp_mask_count(const struct VpMask *m, uintptr_t *count);

/**
 * Copies the mask voxels (x fastest) into `buf`, which must hold `len`
 * bytes with `len` at least the voxel count.
 *
 * # Safety
 * `buf` must be writable for `len` bytes.
 */
int vp_mask_copy(const struct VpMask *m, uint8_t *buf, uintptr_t len);

/**
 * Dice coefficient of two masks on the same grid.
 *
 * # Safety
 * `a`, `b` must be live handles, `dsc` writable.
 */
int vp_mask_dice(const struct VpMask *a, const struct VpMask *b, double *dsc);

/**
 * # Safety
 * `m` must be null or a handle from this library.
 */
void vp_mask_free(struct VpMask *m);

/**
 * Loads a segmentation checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
int vp_segmenter_load(const char *path, struct VpModel **out);

/**
 * Loads a classifier checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
int vp_classifier_load(const char *path, struct VpModel **out);

/**
 * # Safety
 * `m` must be null or a handle from this library.
 */
void vp_model_free(struct VpModel *m);

/**
 * Segments `scan` and, when `classifier` is non-null, classifies the
 * Z-trimmed mask. `mask` receives the postprocessed mask on the
 * preprocessed grid; `trimmed` (optional) its Z-trimmed version;
 * `probability` (optional) the aneurysm probability, NaN without a
 * classifier.
 *
 * # Safety
 * Handles must be live; output pointers writable or null where optional.
 */
int vp_predict(const struct VpConfig *cfg,
               const struct VpModel *segmenter,
               const struct VpModel *classifier,
               const struct VpVolume *scan,
               struct VpMask **mask,
               struct VpMask **trimmed,
               double *probability);

/**
 * Friedman test over an `n × k` row-major score table (rows are cases,
 * columns methods).
 *
 * # Safety
 * `scores` must hold `n * k` values; outputs writable or null.
 */
int vp_friedman(const double *scores,
                uintptr_t n,
                uintptr_t k,
                bool higher_is_better,
                double *chi2,
                double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXPIPE_H */
