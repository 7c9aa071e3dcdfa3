#ifndef REFDENSE_H
#define REFDENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which sequences of a dataset to address.
 */
typedef enum RdSplit {
  RD_SPLIT_TRAIN = 0,
  RD_SPLIT_TEST = 1,
} RdSplit;

/**
 * Result codes of every fallible call.
 */
typedef enum RdStatus {
  RD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RD_STATUS_NULL_ARGUMENT = 1,
  /**
   * Malformed input: schema, configuration, dimensions or encoding.
   */
  RD_STATUS_INVALID_INPUT = 2,
  RD_STATUS_IO = 3,
  /**
   * Training diverged or another runtime failure occurred.
   */
  RD_STATUS_RUNTIME = 4,
  /**
   * The output buffer is too small; required sizes are still reported.
   */
  RD_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Average precision is undefined without positive labels.
   */
  RD_STATUS_NO_POSITIVES = 6,
  RD_STATUS_PANIC = 7,
} RdStatus;

/**
 * Opaque dataset handle.
 */
typedef struct RdDataset RdDataset;

/**
 * Opaque model handle.
 */
typedef struct RdModel RdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call
 * that fails on the same thread.
 */
const char *rd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rd_version(void);

/**
 * Loads a dataset from its manifest JSON.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RdStatus rd_dataset_load(const char *manifest_path, struct RdDataset **out);

/**
 * Generates a synthetic dataset from a SynthSpec JSON (null for the defaults).
 *
 * # Safety
 * `spec_json` must be null or NUL-terminated; `out` must be valid.
 */
enum RdStatus rd_dataset_generate(const char *spec_json, struct RdDataset **out);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `ds` must come from this library and not be used afterwards.
 */
void rd_dataset_free(struct RdDataset *ds);

/**
 * Number of sequences in a split (0 for a null handle).
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t rd_dataset_len(const struct RdDataset *ds, enum RdSplit split);

/**
 * Number of action classes (0 for a null handle).
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t rd_dataset_num_actions(const struct RdDataset *ds);

/**
 * Trains a model. `config_json` holds TrainConfig fields overriding the synthetic
 * preset and may be null.
 *
 * # Safety
 * `ds` must be live, `config_json` null or NUL-terminated, `out` valid.
 */
enum RdStatus rd_model_train(const struct RdDataset *ds,
                             const char *config_json,
                             struct RdModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum RdStatus rd_model_load(const char *path, struct RdModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be live and `path` NUL-terminated.
 */
enum RdStatus rd_model_save(const struct RdModel *model, const char *path);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void rd_model_free(struct RdModel *model);

/**
 * Per-frame test mAP of `model` on `ds`. Fails with `RD_STATUS_NO_POSITIVES` when
 * no class has a positive frame.
 *
 * # Safety
 * Handles must be live and `map_out` valid.
 */
enum RdStatus rd_model_evaluate(const struct RdModel *model,
                                const struct RdDataset *ds,
                                double *map_out);

/**
 * Writes the T×C row-major scores of one sequence into `out` (capacity in
 * elements); `rows` and `cols` receive the shape even when the buffer is too small.
 *
 * # Safety
 * Handles must be live; `out` must hold `capacity` doubles; `rows`/`cols` valid.
 */
enum RdStatus rd_model_predict(const struct RdModel *model,
                               const struct RdDataset *ds,
                               enum RdSplit split,
                               size_t index,
                               double *out,
                               size_t capacity,
                               size_t *rows,
                               size_t *cols);

/**
 * Average precision of `n` scores against binary labels (nonzero = positive).
 *
 * # Safety
 * `scores` and `labels` must each hold `n` elements; `out` must be valid.
 */
enum RdStatus rd_average_precision(const double *scores,
                                   const uint8_t *labels,
                                   size_t n,
                                   double *out);

/**
 * Per-frame mAP of a row-major T×C score matrix against T×C binary labels, over
 * classes with at least one positive.
 *
 * # Safety
 * `scores` and `labels` must each hold `t * c` elements; `out` must be valid.
 */
enum RdStatus rd_per_frame_map(const double *scores,
                               const uint8_t *labels,
                               size_t t,
                               size_t c,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFDENSE_H */
