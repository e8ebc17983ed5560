#ifndef PUSEG_H
#define PUSEG_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum PusegStatus {
  PUSEG_STATUS_OK = 0,
  PUSEG_STATUS_NULL_POINTER = 1,
  PUSEG_STATUS_INVALID_ARGUMENT = 2,
  PUSEG_STATUS_CONFIG = 3,
  PUSEG_STATUS_SHAPE = 4,
  PUSEG_STATUS_IO = 5,
  PUSEG_STATUS_CHECKPOINT = 6,
  PUSEG_STATUS_RUNTIME = 7,
  PUSEG_STATUS_PANIC = 8,
} PusegStatus;

/**
 * A trained segmentation model. Opaque to C.
 */
typedef struct PusegModel PusegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *puseg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *puseg_version(void);

/**
 * Loads a checkpoint file. Release the model with [`puseg_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` a valid pointer.
 */
enum PusegStatus puseg_model_load(const char *path_ptr, struct PusegModel **out_model);

/**
 * Frees a model returned by [`puseg_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`puseg_model_load`] and not be freed twice.
 */
void puseg_model_free(struct PusegModel *model);

/**
 * # Safety
 * `model` and `out_dim` must be valid pointers.
 */
enum PusegStatus puseg_model_feature_dim(const struct PusegModel *model_ptr, size_t *out_dim);

/**
 * Writes per-pixel foreground confidence into `out_conf` (`height * width`).
 *
 * # Safety
 * Buffers must hold `height * width` elements.
 */
enum PusegStatus puseg_model_predict(const struct PusegModel *model_ptr,
                                     const float *pixels,
                                     size_t height,
                                     size_t width,
                                     float *out_conf);

/**
 * Writes the feature stack into `out_features` (`height * width * feature_dim`).
 *
 * # Safety
 * `pixels` must hold `height * width` elements and `out_features`
 * `height * width * feature_dim`.
 */
enum PusegStatus puseg_model_extract_features(const struct PusegModel *model_ptr,
                                              const float *pixels,
                                              size_t height,
                                              size_t width,
                                              float *out_features);

/**
 * Non-negative PU risk of a linear head with the sigmoid surrogate. The
 * prior is `n_p / (n_p + n_u)`. Feature matrices are row-major with `dim`
 * columns.
 *
 * # Safety
 * `positive` must hold `n_p * dim` values, `unlabeled` `n_u * dim` and
 * `weights` `dim`.
 */
enum PusegStatus puseg_pu_risk(const double *positive,
                               size_t n_p,
                               const double *unlabeled,
                               size_t n_u,
                               size_t dim,
                               const double *weights,
                               double bias,
                               double *out_risk);

/**
 * Selects the lower `alpha` percent of `scores`. Writes the chosen
 * positions in ascending order to `out_indices` (capacity `n`) and their
 * number to `out_count`.
 *
 * # Safety
 * `scores` and `out_indices` must hold `n` elements.
 */
enum PusegStatus puseg_select_pu_negatives(const double *scores,
                                           size_t n,
                                           double alpha,
                                           size_t *out_indices,
                                           size_t *out_count);

/**
 * Dice overlap of two binary masks; nonzero counts as foreground.
 *
 * # Safety
 * `pred` and `gt` must hold `n` elements.
 */
enum PusegStatus puseg_dice(const uint8_t *pred, const uint8_t *gt, size_t n, double *out_dice);

/**
 * Renders a centerline heatmap into `out_heatmap` (`height * width`).
 *
 * # Safety
 * `rows` and `cols` must hold `n_points` elements.
 */
enum PusegStatus puseg_build_heatmap(const size_t *rows,
                                     const size_t *cols,
                                     size_t n_points,
                                     size_t height,
                                     size_t width,
                                     double sigma,
                                     double *out_heatmap);

/**
 * Thresholds a confidence map. `out_labels` receives `1` for positives,
 * `0` for negatives and `-1` for unlabeled pixels.
 *
 * # Safety
 * `conf` and `out_labels` must hold `height * width` elements.
 */
enum PusegStatus puseg_select_by_confidence(const float *conf,
                                            size_t height,
                                            size_t width,
                                            double th_p,
                                            double th_n,
                                            int8_t *out_labels);

/**
 * Runs every stage for the config file at `config_path` and writes the
 * final test score (mean Dice or average coverage) to `out_score`.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum PusegStatus puseg_run_pipeline(const char *config_path, double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUSEG_H */
