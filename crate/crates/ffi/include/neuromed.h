#ifndef NEUROMED_H
#define NEUROMED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NmStatus {
  NM_STATUS_OK = 0,
  NM_STATUS_NULL_POINTER = 1,
  NM_STATUS_INVALID_ARGUMENT = 2,
  NM_STATUS_DIMENSION = 3,
  NM_STATUS_CONTRACT = 4,
  NM_STATUS_NUMERIC = 5,
  NM_STATUS_UNCONVERTIBLE = 6,
  NM_STATUS_DEGENERATE_SCALE = 7,
  NM_STATUS_FORMAT = 8,
  NM_STATUS_IO = 9,
  NM_STATUS_INTERNAL = 10,
} NmStatus;

/**
 * Spike encoding of input pixels.
 */
typedef enum NmEncoding {
  /**
   * Use the encoding stored in the network.
   */
  NM_ENCODING_DEFAULT = 0,
  NM_ENCODING_CONSTANT_CURRENT = 1,
  NM_ENCODING_POISSON = 2,
} NmEncoding;

/**
 * Labeled image set.
 */
typedef struct NmDataset NmDataset;

/**
 * Trained feed-forward model.
 */
typedef struct NmModel NmModel;

/**
 * Converted spiking network.
 */
typedef struct NmSnn NmSnn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nm_version(void);

/**
 * Message of the last failure on this thread, or an empty string.
 */
const char *nm_last_error(void);

/**
 * Synthetic dataset with the default class priors.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum NmStatus nm_dataset_generate(size_t n,
                                  size_t patients,
                                  size_t size,
                                  double noise,
                                  uint64_t seed,
                                  struct NmDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NmStatus nm_dataset_load(const char *path, struct NmDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `path` a NUL-terminated string.
 */
enum NmStatus nm_dataset_save(const struct NmDataset *ds, const char *path);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t nm_dataset_len(const struct NmDataset *ds);

/**
 * Copies the labels into `labels[0..capacity]`; fails if `capacity` is short.
 *
 * # Safety
 * `labels` must point to `capacity` writable `uint32_t`.
 */
enum NmStatus nm_dataset_labels(const struct NmDataset *ds, uint32_t *labels, size_t capacity);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void nm_dataset_free(struct NmDataset *ds);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NmStatus nm_model_load(const char *path, struct NmModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum NmStatus nm_model_save(const struct NmModel *model, const char *path);

/**
 * Predicted class per sample of `ds`.
 *
 * # Safety
 * Handles must be live; `labels` must point to `capacity` writable `uint32_t`.
 */
enum NmStatus nm_model_predict(const struct NmModel *model,
                               const struct NmDataset *ds,
                               uint32_t *labels,
                               size_t capacity);

/**
 * # Safety
 * Handles must be live; `accuracy` must be writable.
 */
enum NmStatus nm_model_accuracy(const struct NmModel *model,
                                const struct NmDataset *ds,
                                double *accuracy);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void nm_model_free(struct NmModel *model);

/**
 * Converts `model` to a spiking network, normalizing by the given percentile
 * of positive activations on `calib`. Skips the calibration-set simulation.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum NmStatus nm_snn_convert(const struct NmModel *model,
                             const struct NmDataset *calib,
                             double percentile,
                             struct NmSnn **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NmStatus nm_snn_load(const char *path, struct NmSnn **out);

/**
 * # Safety
 * `net` must be a live handle; `path` a NUL-terminated string.
 */
enum NmStatus nm_snn_save(const struct NmSnn *net, const char *path);

/**
 * Accuracy of the spiking network on `ds` after `timesteps` steps.
 *
 * # Safety
 * Handles must be live; `accuracy` must be writable.
 */
enum NmStatus nm_snn_accuracy(const struct NmSnn *net,
                              const struct NmDataset *ds,
                              size_t timesteps,
                              enum NmEncoding encoding,
                              uint64_t seed,
                              double *accuracy);

/**
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void nm_snn_free(struct NmSnn *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEUROMED_H */
