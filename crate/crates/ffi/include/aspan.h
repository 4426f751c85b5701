#ifndef ASPAN_H
#define ASPAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; zero is success.
 */
enum AspanStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  ASPAN_STATUS_OK = 0,
  ASPAN_STATUS_NULL_POINTER = -1,
  /**
   * Bad shape, argument or configuration.
   */
  ASPAN_STATUS_INVALID = -2,
  /**
   * Non-finite values during computation.
   */
  ASPAN_STATUS_NUMERIC = -3,
  ASPAN_STATUS_IO = -4,
  /**
   * Malformed weights or data files.
   */
  ASPAN_STATUS_FORMAT = -5,
  /**
   * A panic was caught at the boundary.
   */
  ASPAN_STATUS_INTERNAL = -6,
};
#ifndef __cplusplus
typedef int32_t AspanStatus;
#endif // __cplusplus

/**
 * Matches produced by one [`aspan_match`] call.
 */
typedef struct AspanMatchSet AspanMatchSet;

/**
 * Trained matcher.
 */
typedef struct AspanModel AspanModel;

/**
 * One refined correspondence; coordinates are pixels.
 */
typedef struct AspanMatch {
  double x_a;
  double y_a;
  double x_b;
  double y_b;
  double score;
  /**
   * Refinement heatmap variance in squared pixels.
   */
  double variance;
} AspanMatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a
 * success. Valid until the next call on the same thread.
 */
const char *aspan_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aspan_version(void);

/**
 * Loads weights written by `aspan train` from the directory `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
AspanStatus aspan_model_load(const char *path, struct AspanModel **out);

/**
 * Freshly initialized model with the default configuration.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
AspanStatus aspan_model_new(uint64_t seed, struct AspanModel **out);

/**
 * Writes the model's weights to the directory `path`.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
AspanStatus aspan_model_save(const struct AspanModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void aspan_model_free(struct AspanModel *model);

/**
 * Matches two row-major `[height, width, channels]` images. Heights and
 * widths must be multiples of 8 and channels must equal the model's input
 * channels.
 *
 * # Safety
 * Each image pointer must reference `height * width * channels` doubles;
 * `out` must be writable.
 */
AspanStatus aspan_match(const struct AspanModel *model,
                        const double *image_a,
                        size_t height_a,
                        size_t width_a,
                        const double *image_b,
                        size_t height_b,
                        size_t width_b,
                        size_t channels,
                        struct AspanMatchSet **out);

/**
 * Number of matches; zero for a null set.
 *
 * # Safety
 * `set` must be null or come from [`aspan_match`].
 */
size_t aspan_matches_len(const struct AspanMatchSet *set);

/**
 * Copies match `index` into `out`.
 *
 * # Safety
 * `set` must come from [`aspan_match`]; `out` must be writable.
 */
AspanStatus aspan_matches_get(const struct AspanMatchSet *set,
                              size_t index,
                              struct AspanMatch *out);

/**
 * Writes the matches as JSON lines to `path`.
 *
 * # Safety
 * `set` must come from [`aspan_match`]; `path` must be NUL-terminated.
 */
AspanStatus aspan_matches_write_jsonl(const struct AspanMatchSet *set, const char *path);

/**
 * # Safety
 * `set` must come from [`aspan_match`] and not be used afterwards.
 */
void aspan_matches_free(struct AspanMatchSet *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASPAN_H */
