#ifndef SPSS_H
#define SPSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SpssStatus {
  SPSS_STATUS_OK = 0,
  SPSS_STATUS_NULL_POINTER = 1,
  SPSS_STATUS_INVALID_ARGUMENT = 2,
  SPSS_STATUS_SHAPE_MISMATCH = 3,
  SPSS_STATUS_IO = 4,
  SPSS_STATUS_CHECKPOINT = 5,
  SPSS_STATUS_METRICS = 6,
  SPSS_STATUS_INTERNAL = 7,
} SpssStatus;

/**
 * Opaque model handle.
 */
typedef struct SpssModel SpssModel;

/**
 * Dataset-level scores written by [`spss_metrics`].
 */
typedef struct SpssMetrics {
  double mean_iou;
  double mean_f1;
  double mean_accuracy;
} SpssMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *spss_last_error(void);

/**
 * Builds a freshly initialised model. `n_out == 1` selects a sigmoid head,
 * larger values a softmax head.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum SpssStatus spss_model_new(size_t in_channels,
                               size_t n_out,
                               size_t base_filters,
                               uint64_t seed,
                               struct SpssModel **out);

/**
 * Loads a single-precision checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one pointer write.
 */
enum SpssStatus spss_model_load(const char *path, struct SpssModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum SpssStatus spss_model_save(const struct SpssModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void spss_model_free(struct SpssModel *model);

/**
 * Number of output planes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t spss_model_n_out(const struct SpssModel *model);

/**
 * Number of trainable parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t spss_model_param_count(const struct SpssModel *model);

/**
 * Runs one image through the network and writes the activated score maps
 * (`n_out x rows x cols`) to `scores`, whose capacity is `scores_len`.
 *
 * # Safety
 * `pixels` must hold `channels * rows * cols` values and `scores` must be
 * valid for `scores_len` writes.
 */
enum SpssStatus spss_model_forward(const struct SpssModel *model,
                                   const float *pixels,
                                   size_t channels,
                                   size_t rows,
                                   size_t cols,
                                   float *scores,
                                   size_t scores_len);

/**
 * Spatial mean of each score plane, written to `rho[0..n_out]`.
 *
 * # Safety
 * `scores` must hold `n_out * rows * cols` values; `rho` room for `n_out`.
 */
enum SpssStatus spss_gap(const float *scores, size_t n_out, size_t rows, size_t cols, double *rho);

/**
 * Mean squared distance between predicted and target proportions over a
 * batch of `batch` vectors of length `n_classes`.
 *
 * # Safety
 * `pred` and `target` must hold `batch * n_classes` values; `loss` one.
 */
enum SpssStatus spss_loss_sp(const double *pred,
                             const double *target,
                             size_t batch,
                             size_t n_classes,
                             double *loss);

/**
 * Class proportions of a label map. With `n_classes == 1` the labels are
 * foreground bits; otherwise class indices below `n_classes`.
 *
 * # Safety
 * `labels` must hold `rows * cols` values; `out` room for `n_classes`.
 */
enum SpssStatus spss_extract_sp(const uint8_t *labels,
                                size_t rows,
                                size_t cols,
                                size_t n_classes,
                                double *out);

/**
 * Mean IoU, mean F1 and pixel accuracy of predicted against true labels
 * (`n_classes` classes; binary data counts as two, background and
 * foreground).
 *
 * # Safety
 * `pred` and `truth` must hold `n_pixels` values; `out` one struct.
 */
enum SpssStatus spss_metrics(const uint8_t *pred,
                             const uint8_t *truth,
                             size_t n_pixels,
                             size_t n_classes,
                             struct SpssMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPSS_H */
