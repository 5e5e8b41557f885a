#ifndef MAL_H
#define MAL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MalStatus {
  MAL_STATUS_OK = 0,
  MAL_STATUS_NULL_POINTER = 1,
  MAL_STATUS_INVALID_ARGUMENT = 2,
  MAL_STATUS_INVALID_BOX = 3,
  MAL_STATUS_CONFIG = 4,
  MAL_STATUS_IO = 5,
  MAL_STATUS_PARSE = 6,
  MAL_STATUS_SHAPE_MISMATCH = 7,
  MAL_STATUS_NON_FINITE = 8,
  MAL_STATUS_INFEASIBLE = 9,
  MAL_STATUS_CHECKPOINT = 10,
  MAL_STATUS_DIVERGED = 11,
  MAL_STATUS_MISSING_CACHE = 12,
  MAL_STATUS_PANIC = 13,
} MalStatus;

typedef enum MalSplit {
  MAL_SPLIT_TRAIN = 0,
  MAL_SPLIT_VAL = 1,
  MAL_SPLIT_ALL = 2,
} MalSplit;

/**
 * Opaque scene collection.
 */
typedef struct MalDataset MalDataset;

/**
 * Opaque trained scorer with its anchor/render spec.
 */
typedef struct MalModel MalModel;

typedef struct MalBox {
  double x1;
  double y1;
  double x2;
  double y2;
} MalBox;

/**
 * Headline metrics; absent values are NaN.
 */
typedef struct MalEvalSummary {
  double ap;
  double ap50;
  double ap75;
  double score_iou_correlation;
  size_t scenes;
  size_t detections;
} MalEvalSummary;

typedef struct MalDetection {
  struct MalBox bbox;
  uint32_t class_id;
  double score;
} MalDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *mal_last_error(void);

/**
 * Library version, a static string.
 */
const char *mal_version(void);

/**
 * # Safety
 * `a`, `b` and `out` must be valid pointers.
 */
enum MalStatus mal_iou(const struct MalBox *a, const struct MalBox *b, double *out);

/**
 * Generates a dataset from TOML generator settings.
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` must be valid.
 */
enum MalStatus mal_dataset_generate(const char *config_toml, struct MalDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum MalStatus mal_dataset_load(const char *path, struct MalDataset **out);

/**
 * # Safety
 * `dataset` must come from this library; `path` must be a NUL-terminated string.
 */
enum MalStatus mal_dataset_save(const struct MalDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must come from this library; `train` and `val` must be valid.
 */
enum MalStatus mal_dataset_counts(const struct MalDataset *dataset, size_t *train, size_t *val);

/**
 * # Safety
 * `dataset` must be null or come from this library, and not be used afterwards.
 */
void mal_dataset_free(struct MalDataset *dataset);

/**
 * Trains on the train split. `method` is "mal" or "baseline".
 *
 * # Safety
 * `dataset` must come from this library; strings must be null or NUL-terminated; `out` must be valid.
 */
enum MalStatus mal_train(const struct MalDataset *dataset,
                         const char *method,
                         const char *config_toml,
                         struct MalModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum MalStatus mal_model_load(const char *path, struct MalModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum MalStatus mal_model_save(const struct MalModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used afterwards.
 */
void mal_model_free(struct MalModel *model);

/**
 * Evaluates with default inference settings.
 *
 * # Safety
 * Handles must come from this library; `out` must be valid.
 */
enum MalStatus mal_evaluate(const struct MalModel *model,
                            const struct MalDataset *dataset,
                            enum MalSplit split,
                            struct MalEvalSummary *out);

/**
 * Post-NMS detections for scene `scene_index` of the whole dataset.
 * Writes at most `capacity` entries; `total` receives the full count.
 *
 * # Safety
 * Handles must come from this library; `out` must hold `capacity` entries (may be null when 0).
 */
enum MalStatus mal_detect(const struct MalModel *model,
                          const struct MalDataset *dataset,
                          size_t scene_index,
                          struct MalDetection *out,
                          size_t capacity,
                          size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAL_H */
