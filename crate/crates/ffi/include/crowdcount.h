#ifndef CROWDCOUNT_H
#define CROWDCOUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_POINTER = 1,
  CC_STATUS_INVALID_ARGUMENT = 2,
  CC_STATUS_CONFIG = 3,
  CC_STATUS_IO = 4,
  CC_STATUS_FORMAT = 5,
  CC_STATUS_DIVERGED = 6,
  CC_STATUS_CAPACITY = 7,
  CC_STATUS_BUFFER_TOO_SMALL = 8,
  CC_STATUS_PANIC = 9,
} CcStatus;

// Dataset partitions as stored on disk.
typedef enum CcSplit {
  CC_SPLIT_SEED = 0,
  CC_SPLIT_WEAK = 1,
  CC_SPLIT_VAL = 2,
  CC_SPLIT_TEST = 3,
} CcSplit;

// A generated dataset loaded from disk.
typedef struct CcDataset CcDataset;

// Trained or freshly initialized network.
typedef struct CcModel CcModel;

// Count metrics; `rer` is a fraction, not a percentage.
typedef struct CcMetrics {
  double mae;
  double mse;
  double rer;
} CcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length plus one.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t cc_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *cc_version(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for a write.
enum CcStatus cc_model_load(const char *path, struct CcModel **out);

// Initializes a model from a JSON model configuration (null for defaults).
//
// # Safety
// `config_json` must be null or NUL-terminated; `out` valid for a write.
enum CcStatus cc_model_init(const char *config_json, uint64_t seed, struct CcModel **out);

// Writes `model` as a checkpoint.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum CcStatus cc_model_save(const struct CcModel *model,
                            const char *path,
                            uint64_t seed,
                            uint64_t step);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void cc_model_free(struct CcModel *model);

// Number of auxiliary branches.
//
// # Safety
// Pointers must be valid.
enum CcStatus cc_model_num_aux(const struct CcModel *model, size_t *out);

// Predicted count for a row-major `rows x cols` image.
//
// # Safety
// `image` must hold `rows * cols` values; `out` valid for a write.
enum CcStatus cc_model_predict_count(const struct CcModel *model,
                                     const double *image,
                                     size_t rows,
                                     size_t cols,
                                     double *out);

// Density map of `branch` (0 is the primary map) into `out`, which must
// hold `rows * cols` values.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum CcStatus cc_model_predict_density(const struct CcModel *model,
                                       const double *image,
                                       size_t rows,
                                       size_t cols,
                                       size_t branch,
                                       double *out,
                                       size_t out_len);

// Ground-truth density for `n_points` dots given as interleaved `x, y`
// pairs in pixel coordinates. Writes `height * width` values.
//
// # Safety
// `points_xy` must hold `2 * n_points` values; `out` `out_len` values.
enum CcStatus cc_render_density(const double *points_xy,
                                size_t n_points,
                                size_t width,
                                size_t height,
                                double sigma,
                                double truncation,
                                double *out,
                                size_t out_len);

// MAE, root-mean-square error and mean relative error of `n` counts.
//
// # Safety
// `pred` and `gt` must hold `n` values; `out` valid for a write.
enum CcStatus cc_metrics(const double *pred, const double *gt, size_t n, struct CcMetrics *out);

// Opens a dataset directory written by `crowdcount gen-data`.
//
// # Safety
// `dir` must be NUL-terminated; `out` valid for a write.
enum CcStatus cc_dataset_load(const char *dir, struct CcDataset **out);

// Releases a dataset. Null is ignored.
//
// # Safety
// `ds` must come from this library and not be used afterwards.
void cc_dataset_free(struct CcDataset *ds);

// Number of images in `split`, plus the shared image size.
//
// # Safety
// All pointers must be valid.
enum CcStatus cc_dataset_info(const struct CcDataset *ds,
                              enum CcSplit split,
                              size_t *n_images,
                              size_t *rows,
                              size_t *cols);

// Copies image `index` of `split` into `out` and its count label into
// `count`.
//
// # Safety
// `out` must hold `out_len` values; `count` valid for a write.
enum CcStatus cc_dataset_image(const struct CcDataset *ds,
                               enum CcSplit split,
                               size_t index,
                               double *out,
                               size_t out_len,
                               double *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROWDCOUNT_H */
