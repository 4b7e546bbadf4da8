#ifndef VOXMT_H
#define VOXMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VoxmtStatus {
  VOXMT_STATUS_OK = 0,
  VOXMT_STATUS_NULL_ARGUMENT = 1,
  VOXMT_STATUS_INVALID_ARGUMENT = 2,
  VOXMT_STATUS_IO = 3,
  VOXMT_STATUS_FORMAT = 4,
  VOXMT_STATUS_CONFIG = 5,
  VOXMT_STATUS_CONFIG_MISMATCH = 6,
  VOXMT_STATUS_SHAPE = 7,
  VOXMT_STATUS_LABEL = 8,
  VOXMT_STATUS_NUMERIC = 9,
  VOXMT_STATUS_INTERNAL = 10,
  VOXMT_STATUS_PANIC = 11,
} VoxmtStatus;

typedef struct VoxmtModel VoxmtModel;

typedef struct VoxmtPrediction VoxmtPrediction;

typedef struct VoxmtBox {
  float center[3];
  float size[3];
  float yaw;
  float velocity[2];
  float score;
  uint8_t class_id;
} VoxmtBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null.
 * Valid until the next failing call on the same thread.
 */
const char *voxmt_last_error(void);

/**
 * Loads a checkpoint written by `voxmt train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum VoxmtStatus voxmt_model_load(const char *path, struct VoxmtModel **out);

/**
 * Builds a freshly initialized model from TOML config text.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a writable pointer.
 */
enum VoxmtStatus voxmt_model_from_config(const char *config_toml, struct VoxmtModel **out);

/**
 * Point channels the model expects (xyz plus extras).
 *
 * # Safety
 * `model` must come from a `voxmt_model_*` constructor; `out` must be writable.
 */
enum VoxmtStatus voxmt_model_channels(const struct VoxmtModel *model, size_t *out);

/**
 * # Safety
 * `model` must be null or come from a `voxmt_model_*` constructor, and must
 * not be used afterwards.
 */
void voxmt_model_free(struct VoxmtModel *model);

/**
 * Runs segmentation and detection on `num_points` row-major points of
 * `channels` floats each.
 *
 * # Safety
 * `points` must hold `num_points * channels` floats (it may be null when
 * `num_points` is 0); `model` must be valid and `out` writable.
 */
enum VoxmtStatus voxmt_predict(const struct VoxmtModel *model,
                               const float *points,
                               size_t num_points,
                               size_t channels,
                               struct VoxmtPrediction **out);

/**
 * Number of per-point labels (equal to the input point count).
 *
 * # Safety
 * `pred` must be null or a live prediction handle.
 */
size_t voxmt_prediction_num_points(const struct VoxmtPrediction *pred);

/**
 * Labels in `1..=K`, owned by the prediction handle.
 *
 * # Safety
 * `pred` must be null or a live prediction handle.
 */
const uint8_t *voxmt_prediction_labels(const struct VoxmtPrediction *pred);

/**
 * # Safety
 * `pred` must be null or a live prediction handle.
 */
size_t voxmt_prediction_num_boxes(const struct VoxmtPrediction *pred);

/**
 * # Safety
 * `pred` must be a live prediction handle and `out` writable.
 */
enum VoxmtStatus voxmt_prediction_box(const struct VoxmtPrediction *pred,
                                      size_t index,
                                      struct VoxmtBox *out);

/**
 * # Safety
 * `pred` must be null or a live prediction handle, not used afterwards.
 */
void voxmt_prediction_free(struct VoxmtPrediction *pred);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXMT_H */
