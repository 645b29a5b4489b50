#ifndef VOXDISTILL_H
#define VOXDISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum VxdStatus {
  VXD_STATUS_OK = 0,
  VXD_STATUS_NULL_POINTER = 1,
  VXD_STATUS_INVALID_INPUT = 2,
  VXD_STATUS_SHAPE = 3,
  VXD_STATUS_NUMERIC = 4,
  VXD_STATUS_FORMAT = 5,
  VXD_STATUS_IO = 6,
  VXD_STATUS_PANIC = 7,
} VxdStatus;

/**
 * A labeled / unlabeled / test split held in memory.
 */
typedef struct VxdDataset VxdDataset;

/**
 * Trained network weights (the student of a checkpoint).
 */
typedef struct VxdModel VxdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, excluding NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t vxd_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vxd_version(void);

/**
 * Normalized signed distance map of a binary mask (negative inside, in
 * `[-1, 1]`). `out` receives `h * w * d` values.
 *
 * # Safety
 * `mask` and `out` must hold `h * w * d` elements; `dims` and `spacing` three.
 */
enum VxdStatus vxd_signed_distance_map(const uint8_t *mask,
                                       const uintptr_t *dims,
                                       const double *spacing,
                                       double *out);

/**
 * Dice and Jaccard overlap in percent.
 *
 * # Safety
 * `pred` and `truth` must hold `h * w * d` elements.
 */
enum VxdStatus vxd_dice_jaccard(const uint8_t *pred,
                                const uint8_t *truth,
                                const uintptr_t *dims,
                                double *out_dice,
                                double *out_jaccard);

/**
 * Average symmetric surface distance and 95th-percentile Hausdorff distance.
 * Fails with `InvalidInput` when either mask is empty.
 *
 * # Safety
 * `pred` and `truth` must hold `h * w * d` elements; `spacing` three.
 */
enum VxdStatus vxd_surface_distances(const uint8_t *pred,
                                     const uint8_t *truth,
                                     const uintptr_t *dims,
                                     const double *spacing,
                                     double *out_asd,
                                     double *out_hd95);

/**
 * Generates a phantom split in memory with the default phantom family.
 *
 * # Safety
 * `shape` must hold three elements; `out` must be writable.
 */
enum VxdStatus vxd_dataset_generate(const uintptr_t *shape,
                                    uintptr_t n_labeled,
                                    uintptr_t n_unlabeled,
                                    uintptr_t n_test,
                                    uint64_t seed,
                                    struct VxdDataset **out);

/**
 * Loads a dataset directory written by `voxdistill generate`, verifying checksums.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum VxdStatus vxd_dataset_load(const char *dir, struct VxdDataset **out);

/**
 * Number of labeled, unlabeled and test cases.
 *
 * # Safety
 * `dataset` must come from this library; `counts` must hold three elements.
 */
enum VxdStatus vxd_dataset_counts(const struct VxdDataset *dataset, uintptr_t *counts);

/**
 * Copies volume and mask of test case `index`. Either output may be null.
 *
 * # Safety
 * `dataset` must come from this library; `dims` must hold three elements;
 * non-null outputs must hold `h * w * d` elements.
 */
enum VxdStatus vxd_dataset_test_case(const struct VxdDataset *dataset,
                                     uintptr_t index,
                                     uintptr_t *dims,
                                     double *volume,
                                     uint8_t *mask);

/**
 * # Safety
 * `dataset` must be null or come from this library, and not be used afterwards.
 */
void vxd_dataset_free(struct VxdDataset *dataset);

/**
 * Loads the student network of a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated path; `out` must be writable.
 */
enum VxdStatus vxd_model_load(const char *path, struct VxdModel **out);

/**
 * Trains with a TOML experiment config into `run_dir` and returns the final
 * student. `config_path` may be null for the built-in defaults.
 *
 * # Safety
 * Paths must be null (config only) or NUL-terminated; `out` null or writable.
 */
enum VxdStatus vxd_train(const char *config_path, const char *run_dir, struct VxdModel **out);

/**
 * Sliding-window foreground probability of a z-scored volume. `window` and
 * `stride` may be null: the window then defaults to the full volume rounded
 * down to the network's downsampling factor, the stride to half the window.
 *
 * # Safety
 * `volume` and `out_prob` must hold `h * w * d` elements; non-null `window` and
 * `stride` three.
 */
enum VxdStatus vxd_model_predict(const struct VxdModel *model,
                                 const double *volume,
                                 const uintptr_t *dims,
                                 const uintptr_t *window,
                                 const uintptr_t *stride,
                                 double *out_prob);

/**
 * Number of trainable parameters of the model.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum VxdStatus vxd_model_num_params(const struct VxdModel *model, uintptr_t *out);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used afterwards.
 */
void vxd_model_free(struct VxdModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXDISTILL_H */
