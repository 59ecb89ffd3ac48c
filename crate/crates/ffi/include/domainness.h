#ifndef DOMAINNESS_H
#define DOMAINNESS_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DmStatus {
  DM_STATUS_OK = 0,
  DM_STATUS_NULL_ARGUMENT = 1,
  DM_STATUS_INVALID_ARGUMENT = 2,
  DM_STATUS_IO = 3,
  DM_STATUS_FORMAT = 4,
  DM_STATUS_DIMENSION_MISMATCH = 5,
  DM_STATUS_EXTRACTOR = 6,
  DM_STATUS_PANIC = 7,
} DmStatus;

/**
 * Must hold one of the listed values; anything else is undefined behaviour.
 */
typedef enum DmWeighting {
  DM_WEIGHTING_NONE = 0,
  DM_WEIGHTING_ABS_W = 1,
} DmWeighting;

/**
 * RGB image with values in [0, 1].
 */
typedef struct DmImage DmImage;

typedef struct DmMap DmMap;

/**
 * Binary linear domain discriminator.
 */
typedef struct DmModel DmModel;

typedef struct DmMapConfig {
  uint32_t patch;
  uint32_t stride;
  /**
   * Occluder colour, RGB in [0, 1].
   */
  float fill[3];
  enum DmWeighting weighting;
} DmMapConfig;

typedef struct DmRegionStats {
  double mean_in;
  double mean_out;
  size_t n_in;
  size_t n_out;
} DmRegionStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *dm_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *dm_version(void);

/**
 * Creates an image from `height * width * 3` interleaved RGB values.
 *
 * # Safety
 * `data` must point to `len` readable floats; `out` must be writable.
 */
enum DmStatus dm_image_new(uint32_t height,
                           uint32_t width,
                           const float *data,
                           size_t len,
                           struct DmImage **out);

/**
 * Loads an 8-bit RGB or grayscale PNG.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DmStatus dm_image_load(const char *path_, struct DmImage **out);

/**
 * # Safety
 * `img` must come from `dm_image_new`/`dm_image_load` or be null.
 */
void dm_image_free(struct DmImage *img);

/**
 * # Safety
 * `img` must be a live handle; `height` and `width` must be writable.
 */
enum DmStatus dm_image_size(const struct DmImage *img, uint32_t *height, uint32_t *width);

size_t dm_builtin_dim(void);

/**
 * Writes the built-in descriptor of `img` into `out` (`len` must equal
 * `dm_builtin_dim()`).
 *
 * # Safety
 * `img` must be a live handle; `out` must point to `len` writable floats.
 */
enum DmStatus dm_builtin_extract(const struct DmImage *img, float *out, size_t len);

/**
 * Loads a binary `.lmod` domain model.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DmStatus dm_model_load(const char *path_, struct DmModel **out);

/**
 * # Safety
 * `model` must come from `dm_model_load` or be null.
 */
void dm_model_free(struct DmModel *model);

/**
 * # Safety
 * `model` must be a live handle; `dim` must be writable.
 */
enum DmStatus dm_model_dim(const struct DmModel *model, size_t *dim);

/**
 * Decision value `w·f + b`.
 *
 * # Safety
 * `features` must point to `len` readable floats; `out` must be writable.
 */
enum DmStatus dm_model_margin(const struct DmModel *model,
                              const float *features,
                              size_t len,
                              double *out);

/**
 * Patch 16, stride 8, mid-grey fill, `|w|` weighting.
 */
struct DmMapConfig dm_map_config_default(void);

/**
 * Builds the domainness map of `img` with the built-in extractor.
 *
 * # Safety
 * `img`, `model` and `cfg` must be live; `out` must be writable.
 */
enum DmStatus dm_map_build(const struct DmImage *img,
                           const struct DmModel *model,
                           const struct DmMapConfig *cfg,
                           struct DmMap **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DmStatus dm_map_load(const char *path_, struct DmMap **out);

/**
 * # Safety
 * `map` must be live; `path` must be a NUL-terminated string.
 */
enum DmStatus dm_map_save(const struct DmMap *map, const char *path_);

/**
 * # Safety
 * `map` must come from `dm_map_build`/`dm_map_load` or be null.
 */
void dm_map_free(struct DmMap *map);

/**
 * # Safety
 * `map` must be live; `height` and `width` must be writable.
 */
enum DmStatus dm_map_size(const struct DmMap *map, uint32_t *height, uint32_t *width);

/**
 * Copies the row-major scores into `out` (`len` = height × width).
 *
 * # Safety
 * `map` must be live; `out` must point to `len` writable floats.
 */
enum DmStatus dm_map_scores(const struct DmMap *map, float *out, size_t len);

/**
 * Mean domainness inside / outside a mask (row-major, nonzero =
 * foreground) over the centred `crop`×`crop` window.
 *
 * # Safety
 * `map` must be live; `mask` must point to `len` bytes; `out` must be writable.
 */
enum DmStatus dm_fg_bg_stats(const struct DmMap *map,
                             const uint8_t *mask,
                             size_t len,
                             uint32_t crop,
                             struct DmRegionStats *out);

/**
 * Fusion rule: `argmax_c (mean_j level[j][c] + global[c])`.
 *
 * `levels` holds `n_levels` rows of `n_classes` margins. Classes are taken
 * to be in lexicographic order already, so ties go to the lowest index.
 *
 * # Safety
 * `levels` must hold `n_levels * n_classes` doubles, `global` `n_classes`;
 * `out` must be writable.
 */
enum DmStatus dm_fuse(const double *levels,
                      size_t n_levels,
                      const double *global,
                      size_t n_classes,
                      size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOMAINNESS_H */
