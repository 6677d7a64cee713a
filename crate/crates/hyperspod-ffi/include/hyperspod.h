#ifndef HYPERSPOD_H
#define HYPERSPOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible `hsp_*` call.
 */
typedef enum HspStatus {
  /**
   * Success.
   */
  HspStatusOk = 0,
  /**
   * A pointer argument was NULL.
   */
  HspStatusNullPointer = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  HspStatusInvalidUtf8 = 2,
  /**
   * Invalid argument or configuration.
   */
  HspStatusInvalidArgument = 3,
  /**
   * File or serialization error.
   */
  HspStatusIo = 4,
  /**
   * Numerical failure (singular statistics, degenerate data).
   */
  HspStatusNumeric = 5,
  /**
   * An internal panic was caught.
   */
  HspStatusPanic = 6,
} HspStatus;

/**
 * Opaque hyperspectral cube handle.
 */
typedef struct HspCube HspCube;

/**
 * Opaque detection list handle.
 */
typedef struct HspDetections HspDetections;

/**
 * Opaque per-pixel score map handle.
 */
typedef struct HspScoreMap HspScoreMap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; empty string when no
 * failure occurred. The pointer stays valid until the next failing call
 * on the same thread.
 */
const char *hsp_last_error_message(void);

/**
 * Read a cube from a `.hsc` file (with its sidecar header) into a new
 * handle stored in `*out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum HspStatus hsp_cube_read(const char *path, struct HspCube **out);

/**
 * Write a cube (data plus sidecar header) to `path`.
 *
 * # Safety
 * `cube` must be a live handle and `path` a valid NUL-terminated string.
 */
enum HspStatus hsp_cube_write(const struct HspCube *cube, const char *path);

/**
 * Fetch cube dimensions; any of the out pointers may be NULL to skip.
 *
 * # Safety
 * `cube` must be a live handle.
 */
enum HspStatus hsp_cube_dims(const struct HspCube *cube,
                             uintptr_t *height,
                             uintptr_t *width,
                             uintptr_t *bands);

/**
 * Release a cube handle. NULL is allowed.
 *
 * # Safety
 * `cube` must be NULL or a handle not freed before.
 */
void hsp_cube_free(struct HspCube *cube);

/**
 * Run one classic detector over `cube` for a single prior signature.
 *
 * `method` is a NUL-terminated name: "cem", "smf", "osp", "asd", or
 * "tcimf" (OSP/TCIMF run with an empty undesired set here). `prior`
 * points to `prior_len` per-band values which must match the cube's band
 * count. `win_in`/`win_out` are the odd dual-window sizes.
 *
 * # Safety
 * All pointers must be valid; `prior` must reference `prior_len` doubles.
 */
enum HspStatus hsp_detect(const struct HspCube *cube,
                          const char *method,
                          const double *prior,
                          uintptr_t prior_len,
                          uintptr_t win_in,
                          uintptr_t win_out,
                          struct HspScoreMap **out);

/**
 * Fetch score-map dimensions; out pointers may be NULL to skip.
 *
 * # Safety
 * `map` must be a live handle.
 */
enum HspStatus hsp_score_map_dims(const struct HspScoreMap *map,
                                  uintptr_t *height,
                                  uintptr_t *width);

/**
 * Copy the row-major scores into `buffer` (`buffer_len` >= height*width).
 *
 * # Safety
 * `buffer` must reference `buffer_len` writable floats.
 */
enum HspStatus hsp_score_map_copy(const struct HspScoreMap *map,
                                  float *buffer,
                                  uintptr_t buffer_len);

/**
 * Release a score-map handle. NULL is allowed.
 *
 * # Safety
 * `map` must be NULL or a handle not freed before.
 */
void hsp_score_map_free(struct HspScoreMap *map);

/**
 * Threshold a score map (after min-max normalization) and report one
 * detection per connected component.
 *
 * # Safety
 * `map` must be a live handle and `out` a valid pointer.
 */
enum HspStatus hsp_scores_to_detections(const struct HspScoreMap *map,
                                        double threshold,
                                        struct HspDetections **out);

/**
 * Number of detections in the list.
 *
 * # Safety
 * `dets` must be a live handle and `count` a valid pointer.
 */
enum HspStatus hsp_detections_count(const struct HspDetections *dets, uintptr_t *count);

/**
 * Fetch detection `index` as center-format box `[cx, cy, w, h]` (pixel
 * units), class id, and confidence. Out pointers may be NULL to skip.
 *
 * # Safety
 * `dets` must be a live handle; `bbox`, when non-NULL, must reference
 * four writable doubles.
 */
enum HspStatus hsp_detections_get(const struct HspDetections *dets,
                                  uintptr_t index,
                                  double *bbox,
                                  uintptr_t *class_id,
                                  double *confidence);

/**
 * Release a detection-list handle. NULL is allowed.
 *
 * # Safety
 * `dets` must be NULL or a handle not freed before.
 */
void hsp_detections_free(struct HspDetections *dets);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERSPOD_H */
