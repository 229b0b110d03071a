#ifndef VMAE_H
#define VMAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Values 2–4 match the command-line tool's exit codes.
 */
typedef enum {
  VMAE_STATUS_OK = 0,
  /**
   * Null pointer, non-UTF-8 path or out-of-range scalar.
   */
  VMAE_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Shape, config or data mismatch.
   */
  VMAE_STATUS_CONFIG = 2,
  VMAE_STATUS_IO = 3,
  /**
   * Corrupt or unrecognised file.
   */
  VMAE_STATUS_FORMAT = 4,
  VMAE_STATUS_NUMERIC = 5,
  VMAE_STATUS_CONTRACT = 6,
  VMAE_STATUS_BUFFER_TOO_SMALL = 7,
  VMAE_STATUS_PANIC = 8,
} VmaeStatus;

/**
 * A fine-tuned encoder plus classification head.
 */
typedef struct VmaeClassifier VmaeClassifier;

/**
 * A `frames × channels × height × width` clip with values in [0, 1].
 */
typedef struct VmaeClip VmaeClip;

/**
 * A pretrained masked autoencoder (tokenizer, selection net, encoder, decoder).
 */
typedef struct VmaeModel VmaeModel;

/**
 * Macro-averaged clip metrics.
 */
typedef struct {
  double accuracy;
  double precision;
  double recall;
  double jaccard;
} VmaeMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *vmae_version(void);

/**
 * Copy the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `cap > 0`). Returns the full message length
 * plus one, so a second call with that capacity gets all of it.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t vmae_last_error(char *buf, size_t cap);

/**
 * Read a clip file written by the corpus generator.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
VmaeStatus vmae_clip_load(const char *path, VmaeClip **out);

/**
 * Build a clip from `frames * channels * height * width` floats in
 * frame, channel, row, column order.
 *
 * # Safety
 * `pixels` must point to that many floats; `out` must be writable.
 */
VmaeStatus vmae_clip_from_pixels(size_t frames,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 const float *pixels,
                                 VmaeClip **out);

/**
 * Write `[frames, channels, height, width]` into `shape`.
 *
 * # Safety
 * `clip` must be a live handle; `shape` must hold 4 values.
 */
VmaeStatus vmae_clip_shape(const VmaeClip *clip, size_t *shape);

/**
 * # Safety
 * `clip` must be null or a handle from this library, freed at most once.
 */
void vmae_clip_free(VmaeClip *clip);

/**
 * Load a pretraining checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
VmaeStatus vmae_model_load(const char *path, VmaeModel **out);

/**
 * Number of tokens the model cuts `clip` into.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
VmaeStatus vmae_model_num_tokens(const VmaeModel *model, const VmaeClip *clip, size_t *out);

/**
 * The selection network's per-token visibility probabilities for `clip`.
 *
 * # Safety
 * Handles must be live; `probs` must hold `cap` doubles.
 */
VmaeStatus vmae_model_selection_probs(const VmaeModel *model,
                                      const VmaeClip *clip,
                                      double *probs,
                                      size_t cap);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed at most once.
 */
void vmae_model_free(VmaeModel *model);

/**
 * Load a classifier saved by the fine-tuning command.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
VmaeStatus vmae_classifier_load(const char *path, VmaeClassifier **out);

/**
 * # Safety
 * `clf` must be live; `out` must be writable.
 */
VmaeStatus vmae_classifier_num_classes(const VmaeClassifier *clf, size_t *out);

/**
 * Class probabilities for `clip`; `predicted` (optional) receives the
 * arg-max, lowest index on ties.
 *
 * # Safety
 * Handles must be live; `probs` must hold `cap` doubles; `predicted`
 * must be null or writable.
 */
VmaeStatus vmae_classifier_predict(const VmaeClassifier *clf,
                                   const VmaeClip *clip,
                                   double *probs,
                                   size_t cap,
                                   size_t *predicted);

/**
 * # Safety
 * `clf` must be null or a handle from this library, freed at most once.
 */
void vmae_classifier_free(VmaeClassifier *clf);

/**
 * How many of `n` tokens stay visible at masking ratio `ratio`.
 *
 * # Safety
 * `out` must be writable.
 */
VmaeStatus vmae_visible_count(size_t n, double ratio, size_t *out);

/**
 * Draw a visible set without replacement from `probs` (positive, summing
 * to one). Ids are written sorted; `count` receives how many.
 *
 * # Safety
 * `probs` must hold `n` doubles, `visible` `cap` values; `count` writable.
 */
VmaeStatus vmae_sample_visible(const double *probs,
                               size_t n,
                               double ratio,
                               uint64_t seed,
                               size_t *visible,
                               size_t cap,
                               size_t *count);

/**
 * Accuracy and macro precision / recall / Jaccard of `n` predictions.
 *
 * # Safety
 * `predicted` and `labels` must hold `n` values; `out` must be writable.
 */
VmaeStatus vmae_compute_metrics(const size_t *predicted,
                                const size_t *labels,
                                size_t n,
                                size_t num_classes,
                                VmaeMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VMAE_H */
