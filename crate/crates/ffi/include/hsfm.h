#ifndef HSFM_H
#define HSFM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HsfmStatus {
  HSFM_STATUS_OK = 0,
  HSFM_STATUS_NULL_POINTER = 1,
  HSFM_STATUS_INVALID_ARGUMENT = 2,
  HSFM_STATUS_IO = 3,
  /**
   * Bad magic, unsupported version or truncated file.
   */
  HSFM_STATUS_FORMAT = 4,
  HSFM_STATUS_VALIDATION = 5,
  HSFM_STATUS_SHAPE = 6,
  /**
   * Non-finite values during training.
   */
  HSFM_STATUS_NUMERIC = 7,
  HSFM_STATUS_CONFIG = 8,
  /**
   * The run finished but reported failure (self-check, sweep points).
   */
  HSFM_STATUS_FAILED = 9,
  HSFM_STATUS_PANIC = 10,
} HsfmStatus;

typedef enum HsfmSplitPart {
  HSFM_SPLIT_PART_TRAIN = 0,
  HSFM_SPLIT_PART_VAL = 1,
  HSFM_SPLIT_PART_TEST = 2,
} HsfmSplitPart;

/**
 * Opaque handle to a grouped feature dataset.
 */
typedef struct HsfmDataset HsfmDataset;

/**
 * Opaque handle to a linear softmax head.
 */
typedef struct HsfmHead HsfmHead;

/**
 * Opaque handle to a train/val/test triple.
 */
typedef struct HsfmSplit HsfmSplit;

/**
 * Opaque handle to a learned support set.
 */
typedef struct HsfmSupport HsfmSupport;

typedef struct HsfmDatasetInfo {
  size_t rows;
  size_t dim;
  size_t classes;
  size_t groups;
} HsfmDatasetInfo;

/**
 * Full-batch gradient descent settings. `clip_norm <= 0` disables clipping.
 */
typedef struct HsfmGdOptions {
  size_t steps;
  double lr;
  double clip_norm;
  double weight_decay;
} HsfmGdOptions;

typedef struct HsfmEvalSummary {
  double worst_group_accuracy;
  double average_accuracy;
  double mean_loss;
  size_t group_count;
} HsfmEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hsfm_version(void);

/**
 * Message for the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *hsfm_last_error_message(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HsfmStatus hsfm_dataset_read(const char *path, struct HsfmDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `path` a NUL-terminated string.
 */
enum HsfmStatus hsfm_dataset_write(const struct HsfmDataset *ds, const char *path);

/**
 * Build a dataset from row-major `features` (`rows * dim` floats) and
 * per-row `labels` and `groups`. The arrays are copied.
 *
 * # Safety
 * The arrays must hold at least the stated number of elements (they may be
 * NULL when `rows` is 0); `out` must be writable.
 */
enum HsfmStatus hsfm_dataset_from_arrays(const float *features,
                                         const uint32_t *labels,
                                         const uint32_t *groups,
                                         size_t rows,
                                         size_t dim,
                                         size_t classes,
                                         size_t group_count,
                                         struct HsfmDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `info` must be writable.
 */
enum HsfmStatus hsfm_dataset_info(const struct HsfmDataset *ds, struct HsfmDatasetInfo *info);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void hsfm_dataset_free(struct HsfmDataset *ds);

/**
 * Generate a synthetic split. `config_json` is a synthetic-data config
 * object; NULL selects the canonical two-class, two-environment benchmark.
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be writable.
 */
enum HsfmStatus hsfm_split_synth(const char *config_json, struct HsfmSplit **out);

/**
 * # Safety
 * The paths must be NUL-terminated strings; `out` must be writable.
 */
enum HsfmStatus hsfm_split_read(const char *train,
                                const char *val,
                                const char *test,
                                struct HsfmSplit **out);

/**
 * Copy one part of a split into a new dataset handle.
 *
 * # Safety
 * `split` must be a live split handle; `out` must be writable.
 */
enum HsfmStatus hsfm_split_part(const struct HsfmSplit *split,
                                enum HsfmSplitPart part,
                                struct HsfmDataset **out);

/**
 * # Safety
 * `split` must be NULL or a handle not yet freed.
 */
void hsfm_split_free(struct HsfmSplit *split);

/**
 * # Safety
 * `out` must be writable.
 */
enum HsfmStatus hsfm_head_zeros(size_t classes, size_t dim, struct HsfmHead **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum HsfmStatus hsfm_head_read(const char *path, struct HsfmHead **out);

/**
 * # Safety
 * `head` must be a live head handle; `path` NUL-terminated.
 */
enum HsfmStatus hsfm_head_write(const struct HsfmHead *head, const char *path);

/**
 * Copy the head's parameters out: `weights` receives `classes * dim`
 * row-major values and `bias` receives `classes` values. Either buffer may
 * be NULL to skip it.
 *
 * # Safety
 * Non-NULL buffers must hold at least the stated lengths.
 */
enum HsfmStatus hsfm_head_params(const struct HsfmHead *head,
                                 double *weights,
                                 size_t weights_len,
                                 double *bias,
                                 size_t bias_len);

/**
 * # Safety
 * `head` must be NULL or a handle not yet freed.
 */
void hsfm_head_free(struct HsfmHead *head);

/**
 * Full-batch ERM from `head0` on `ds`.
 *
 * # Safety
 * Handles must be live; `opts` readable; `out` writable.
 */
enum HsfmStatus hsfm_erm_train(const struct HsfmHead *head0,
                               const struct HsfmDataset *ds,
                               const struct HsfmGdOptions *opts,
                               struct HsfmHead **out);

/**
 * Retrain `head0` on a balanced subsample of `val`, balancing groups when
 * `by_group` is true and classes otherwise.
 *
 * # Safety
 * Handles must be live; `opts` readable; `out` writable.
 */
enum HsfmStatus hsfm_dfr_train(const struct HsfmHead *head0,
                               const struct HsfmDataset *val,
                               const struct HsfmGdOptions *opts,
                               bool by_group,
                               uint64_t seed,
                               struct HsfmHead **out);

/**
 * Run HSFM from `head0` on `split`. `preset` names a hyperparameter preset
 * (NULL for the synthetic default) and `overrides_json` is an optional JSON
 * object whose fields replace the preset's. Either output may be NULL when
 * not wanted.
 *
 * # Safety
 * Handles must be live; strings NULL or NUL-terminated; non-NULL outputs
 * writable.
 */
enum HsfmStatus hsfm_train(const struct HsfmHead *head0,
                           const struct HsfmSplit *split,
                           const char *preset,
                           const char *overrides_json,
                           struct HsfmHead **out_head,
                           struct HsfmSupport **out_support);

/**
 * Write `<prefix>.init` and `<prefix>.opt` HSFM-FS files for the support set.
 *
 * # Safety
 * `support` must be live; `prefix` NUL-terminated.
 */
enum HsfmStatus hsfm_support_export(const struct HsfmSupport *support, const char *prefix);

/**
 * Number of support rows and their dimension.
 *
 * # Safety
 * `support` must be live; `rows` and `dim` writable.
 */
enum HsfmStatus hsfm_support_shape(const struct HsfmSupport *support, size_t *rows, size_t *dim);

/**
 * # Safety
 * `support` must be NULL or a handle not yet freed.
 */
void hsfm_support_free(struct HsfmSupport *support);

/**
 * Evaluate `head` on `ds`. When `per_group` is non-NULL it receives one
 * accuracy per group (NaN for groups without rows) and `per_group_len` must
 * be at least the group count.
 *
 * # Safety
 * Handles must be live; `summary` writable; `per_group` NULL or writable for
 * `per_group_len` values.
 */
enum HsfmStatus hsfm_evaluate(const struct HsfmHead *head,
                              const struct HsfmDataset *ds,
                              struct HsfmEvalSummary *summary,
                              double *per_group,
                              size_t per_group_len);

/**
 * Run a CLI command (`"gen-data"`, `"train-hsfm"`, ...) with the config file
 * at `config_path`, writing into `out_dir`.
 *
 * # Safety
 * All strings must be NUL-terminated.
 */
enum HsfmStatus hsfm_run_command(const char *command, const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSFM_H */
