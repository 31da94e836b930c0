#ifndef HKD_H
#define HKD_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HkdStatus {
  HKD_STATUS_OK = 0,
  HKD_STATUS_NULL_POINTER = 1,
  HKD_STATUS_INVALID_ARGUMENT = 2,
  HKD_STATUS_CONFIG = 3,
  HKD_STATUS_IO = 4,
  HKD_STATUS_PARSE = 5,
  HKD_STATUS_NUMERICAL = 6,
  HKD_STATUS_CHECKPOINT_MISMATCH = 7,
  HKD_STATUS_CHECK_FAILED = 8,
  HKD_STATUS_PANIC = 9,
} HkdStatus;

/**
 * Classifier restored from a teacher or student checkpoint.
 */
typedef struct HkdModel HkdModel;

/**
 * Per-sample weight history with its ensembling settings.
 */
typedef struct HkdWeightStore HkdWeightStore;

/**
 * Loss weights of one sample.
 */
typedef struct HkdWeightPair {
  double beta;
  double gamma;
} HkdWeightPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *hkd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hkd_version(void);

/**
 * Prediction entropy of `probs[0..len]`, divided by `ln(len)` when `normalize`.
 *
 * # Safety
 * `probs` must be valid for `len` reads and `out_value` for one write.
 */
enum HkdStatus hkd_uncertainty(const double *probs, size_t len, bool normalize, double *out_value);

/**
 * Cross-entropy of one row of logits.
 *
 * # Safety
 * `logits` must be valid for `len` reads and `out_value` for one write.
 */
enum HkdStatus hkd_cross_entropy(const double *logits, size_t len, size_t label, double *out_value);

/**
 * Soft-label KL divergence from teacher to student probabilities at `temperature`.
 *
 * # Safety
 * `teacher` and `student` must be valid for `len` reads and `out_value` for one write.
 */
enum HkdStatus hkd_kd_vanilla(const double *teacher,
                              const double *student,
                              size_t len,
                              double temperature,
                              double *out_value);

/**
 * New empty weight store. Entropy is taken as normalized.
 *
 * # Safety
 * `out_store` must be valid for one write.
 */
enum HkdStatus hkd_store_new(double epsilon, double threshold, struct HkdWeightStore **out_store);

/**
 * # Safety
 * `store` must be null or a handle from [`hkd_store_new`] not yet freed.
 */
void hkd_store_free(struct HkdWeightStore *store);

/**
 * Ensembles `fresh` for `sample_id` at visit `step` and records the result.
 * `step` must exceed the sample's previous step.
 *
 * # Safety
 * `store` must be a live handle and `out_pair` valid for one write.
 */
enum HkdStatus hkd_store_ensemble(struct HkdWeightStore *store,
                                  uint64_t sample_id,
                                  struct HkdWeightPair fresh,
                                  double uncertainty,
                                  uint64_t step,
                                  struct HkdWeightPair *out_pair);

/**
 * Number of samples with stored weights.
 *
 * # Safety
 * `store` must be a live handle and `out_len` valid for one write.
 */
enum HkdStatus hkd_store_len(const struct HkdWeightStore *store, size_t *out_len);

/**
 * Loads a teacher or student checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out_model` valid for one write.
 */
enum HkdStatus hkd_model_load(const char *path, struct HkdModel **out_model);

/**
 * # Safety
 * `model` must be null or a handle from [`hkd_model_load`] not yet freed.
 */
void hkd_model_free(struct HkdModel *model);

/**
 * Input width and class count of a model.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be valid for one write each.
 */
enum HkdStatus hkd_model_dims(const struct HkdModel *model,
                              size_t *out_inputs,
                              size_t *out_classes);

/**
 * Class probabilities for `rows` row-major samples.
 * `out_probs` receives `rows * classes` values.
 *
 * # Safety
 * `x` must be valid for `rows * inputs` reads and `out_probs` for `out_len` writes.
 */
enum HkdStatus hkd_model_predict(const struct HkdModel *model,
                                 const double *x,
                                 size_t rows,
                                 double *out_probs,
                                 size_t out_len);

/**
 * Runs the finite-difference suite on five seeds starting at `seed`.
 * Returns `CHECK_FAILED` (naming the checks) when any tolerance is exceeded.
 *
 * # Safety
 * `out_worst` must be null or valid for one write.
 */
enum HkdStatus hkd_gradcheck(uint64_t seed, double *out_worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HKD_H */
