#ifndef DETCAL_H
#define DETCAL_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Number of entries in a [`DetcalMetricReport`].
 */
#define DETCAL_METRIC_COUNT 11

typedef enum DetcalStatus {
  DETCAL_STATUS_OK = 0,
  DETCAL_STATUS_NULL_POINTER = 1,
  DETCAL_STATUS_INVALID_ARGUMENT = 2,
  DETCAL_STATUS_INPUT_SHAPE = 3,
  DETCAL_STATUS_NUMERIC_OVERFLOW = 4,
  DETCAL_STATUS_CONFIG = 5,
  DETCAL_STATUS_DIVERGENCE = 6,
  DETCAL_STATUS_DEGENERATE_VALIDATION = 7,
  DETCAL_STATUS_DEGENERATE_CLASS = 8,
  DETCAL_STATUS_UNDEFINED_METRIC = 9,
  DETCAL_STATUS_MODE = 10,
  DETCAL_STATUS_PARSE = 11,
  DETCAL_STATUS_IO = 12,
  DETCAL_STATUS_SERDE = 13,
  DETCAL_STATUS_PANIC = 14,
} DetcalStatus;

typedef enum DetcalBinMode {
  DETCAL_BIN_MODE_EQUAL_WIDTH = 0,
  DETCAL_BIN_MODE_QUANTILE = 1,
} DetcalBinMode;

/**
 * Opaque dataset handle.
 */
typedef struct DetcalDataset DetcalDataset;

/**
 * Opaque detector handle.
 */
typedef struct DetcalDetector DetcalDetector;

/**
 * Metric values in the order of [`detcal_metric_name`]; NaN when undefined.
 */
typedef struct DetcalMetricReport {
  double values[DETCAL_METRIC_COUNT];
} DetcalMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *detcal_version(void);

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes,
 * or 0 when no error has occurred.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t detcal_last_error_message(char *buf, size_t len);

/**
 * Name of metric `index` in [`DetcalMetricReport::values`], or null when
 * out of range.
 */
const char *detcal_metric_name(size_t index);

/**
 * Load a dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DetcalStatus detcal_dataset_load(const char *path, struct DetcalDataset **out);

/**
 * Number of examples, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t detcal_dataset_len(const struct DetcalDataset *ds);

/**
 * Feature dimension, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t detcal_dataset_dimension(const struct DetcalDataset *ds);

/**
 * Copy the labels into `out` (`len` must equal the dataset length).
 *
 * # Safety
 * `ds` must be a live handle; `out` must point to `len` writable bytes.
 */
enum DetcalStatus detcal_dataset_labels(const struct DetcalDataset *ds, uint8_t *out, size_t len);

/**
 * # Safety
 * `ds` must be null or a handle from [`detcal_dataset_load`] not yet freed.
 */
void detcal_dataset_free(struct DetcalDataset *ds);

/**
 * Load a detector bundle directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DetcalStatus detcal_detector_load(const char *path, struct DetcalDetector **out);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or a live handle.
 */
size_t detcal_detector_input_dim(const struct DetcalDetector *det);

/**
 * # Safety
 * `det` must be null or a handle from [`detcal_detector_load`] not yet freed.
 */
void detcal_detector_free(struct DetcalDetector *det);

/**
 * Predict `rows` row-major feature vectors of length `dim`. Row `i` draws
 * its stochastic passes from the substream `(seed, i)`, matching the
 * library's dataset prediction. `out_entropy` may be null.
 *
 * # Safety
 * `features` must point to `rows * dim` doubles; `out_probs` (and
 * `out_entropy` when non-null) to `rows` writable doubles.
 */
enum DetcalStatus detcal_detector_predict(const struct DetcalDetector *det,
                                          const double *features,
                                          size_t rows,
                                          size_t dim,
                                          uint64_t seed,
                                          double *out_probs,
                                          double *out_entropy);

/**
 * Predict every example of a dataset; `len` must equal its length.
 * `out_entropy` may be null.
 *
 * # Safety
 * Handles must be live; outputs must point to `len` writable doubles.
 */
enum DetcalStatus detcal_detector_predict_dataset(const struct DetcalDetector *det,
                                                  const struct DetcalDataset *ds,
                                                  uint64_t seed,
                                                  double *out_probs,
                                                  double *out_entropy,
                                                  size_t len);

/**
 * All eleven metrics of `n` predicted probabilities against 0/1 labels.
 *
 * # Safety
 * `probs` and `labels` must point to `n` elements; `out` must be writable.
 */
enum DetcalStatus detcal_metric_report(const double *probs,
                                       const uint8_t *labels,
                                       size_t n,
                                       size_t bins,
                                       enum DetcalBinMode mode,
                                       struct DetcalMetricReport *out);

/**
 * Expected calibration error (`unweighted == false`) or its unweighted
 * variant over non-empty bins.
 *
 * # Safety
 * `probs` and `labels` must point to `n` elements; `out` must be writable.
 */
enum DetcalStatus detcal_calibration_error(const double *probs,
                                           const uint8_t *labels,
                                           size_t n,
                                           size_t bins,
                                           enum DetcalBinMode mode,
                                           bool unweighted,
                                           double *out);

/**
 * Entropy of the weighted-mean prediction of `count` member probabilities.
 * `weights` may be null for uniform weights.
 *
 * # Safety
 * `member_probs` (and `weights` when non-null) must point to `count`
 * doubles; `out` must be writable.
 */
enum DetcalStatus detcal_predictive_entropy(const double *member_probs,
                                            const double *weights,
                                            size_t count,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DETCAL_H */
