#ifndef COLLIS_H
#define COLLIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum CollisStatus {
  COLLIS_STATUS_OK = 0,
  COLLIS_STATUS_NULL_POINTER = 1,
  COLLIS_STATUS_INVALID_ARGUMENT = 2,
  COLLIS_STATUS_LENGTH_MISMATCH = 3,
  COLLIS_STATUS_CONFIG = 4,
  COLLIS_STATUS_FORMAT = 5,
  COLLIS_STATUS_NON_FINITE = 6,
  COLLIS_STATUS_IO = 7,
  COLLIS_STATUS_PANIC = 8,
} CollisStatus;

/**
 * Grid family with its default resolution.
 */
typedef enum CollisRepr {
  COLLIS_REPR_RANGE = 0,
  COLLIS_REPR_POLAR = 1,
  COLLIS_REPR_VOXEL = 2,
} CollisRepr;

/**
 * Opaque mixing-probability controller.
 */
typedef struct CollisCda CollisCda;

/**
 * Opaque point cloud.
 */
typedef struct CollisCloud CollisCloud;

/**
 * Opaque student classifier.
 */
typedef struct CollisStudent CollisStudent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *collis_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *collis_version(void);

/**
 * Builds a cloud from `n` interleaved (x, y, z, intensity) records.
 *
 * # Safety
 * `xyzi` must point to `4 * n` floats and `out` to a writable handle slot.
 */
enum CollisStatus collis_cloud_new(const float *xyzi,
                                   size_t n,
                                   uint16_t num_classes,
                                   struct CollisCloud **out);

/**
 * Generates one synthetic scene with the default generator settings.
 *
 * # Safety
 * `out` must be a writable handle slot.
 */
enum CollisStatus collis_cloud_generate(uint64_t seed, struct CollisCloud **out);

/**
 * # Safety
 * `file` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum CollisStatus collis_cloud_read(const char *file, struct CollisCloud **out);

/**
 * # Safety
 * `cloud` must be a live handle and `file` a NUL-terminated string.
 */
enum CollisStatus collis_cloud_write(const struct CollisCloud *cloud, const char *file);

/**
 * Number of points, or 0 for NULL.
 *
 * # Safety
 * `cloud` must be NULL or a live handle.
 */
size_t collis_cloud_len(const struct CollisCloud *cloud);

/**
 * Attaches one label per point.
 *
 * # Safety
 * `labels` must point to `n` bytes.
 */
enum CollisStatus collis_cloud_set_labels(struct CollisCloud *cloud,
                                          const uint8_t *labels,
                                          size_t n);

/**
 * Copies the labels into `out`; fails when the cloud is unlabeled.
 *
 * # Safety
 * `out` must point to `n` writable bytes.
 */
enum CollisStatus collis_cloud_labels(const struct CollisCloud *cloud, uint8_t *out, size_t n);

/**
 * # Safety
 * `cloud` must be NULL or a handle not yet freed.
 */
void collis_cloud_free(struct CollisCloud *cloud);

/**
 * Writes each point's cell index in the default grid of `repr`, or -1 for
 * points outside the grid.
 *
 * # Safety
 * `out` must point to `n` writable integers, `n` equal to the cloud length.
 */
enum CollisStatus collis_project(const struct CollisCloud *cloud,
                                 enum CollisRepr repr,
                                 int64_t *out,
                                 size_t n);

/**
 * Fresh randomly initialised student.
 *
 * # Safety
 * `out` must be a writable handle slot.
 */
enum CollisStatus collis_student_new(uint32_t id,
                                     enum CollisRepr repr,
                                     size_t hidden,
                                     size_t classes,
                                     uint64_t seed,
                                     struct CollisStudent **out);

/**
 * # Safety
 * `file` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum CollisStatus collis_student_read(const char *file,
                                      enum CollisRepr repr,
                                      struct CollisStudent **out);

/**
 * # Safety
 * `student` must be a live handle and `file` a NUL-terminated string.
 */
enum CollisStatus collis_student_write(const struct CollisStudent *student, const char *file);

/**
 * Per-point predicted class and confidence. Either output may be NULL.
 *
 * # Safety
 * Non-NULL outputs must point to `n` writable elements, `n` equal to the
 * cloud length.
 */
enum CollisStatus collis_student_predict(const struct CollisStudent *student,
                                         const struct CollisCloud *cloud,
                                         uint8_t *labels,
                                         double *confidence,
                                         size_t n);

/**
 * # Safety
 * `student` must be NULL or a handle not yet freed.
 */
void collis_student_free(struct CollisStudent *student);

/**
 * Consensus-driven controller starting at `q_init`, updating every `step_size` observations.
 *
 * # Safety
 * `out` must be a writable handle slot.
 */
enum CollisStatus collis_cda_new_consensus(double q_init, size_t step_size, struct CollisCda **out);

/**
 * # Safety
 * `out` must be a writable handle slot.
 */
enum CollisStatus collis_cda_new_constant(double q, struct CollisCda **out);

/**
 * Feeds one step's agreement; writes the current probability to `q_out` if non-NULL.
 *
 * # Safety
 * `cda` must be a live handle; `q_out` NULL or writable.
 */
enum CollisStatus collis_cda_observe(struct CollisCda *cda,
                                     double agreement,
                                     bool mixed,
                                     double *q_out);

/**
 * Current mixing probability, or NaN for NULL.
 *
 * # Safety
 * `cda` must be NULL or a live handle.
 */
double collis_cda_q(const struct CollisCda *cda);

/**
 * # Safety
 * `cda` must be NULL or a handle not yet freed.
 */
void collis_cda_free(struct CollisCda *cda);

/**
 * Epoch-linear reliability and unlabeled-loss weight.
 *
 * # Safety
 * `beta` and `lambda_u` must be writable.
 */
enum CollisStatus collis_absolute_reliability(size_t epoch,
                                              size_t max_epochs,
                                              double lambda0,
                                              double *beta,
                                              double *lambda_u);

/**
 * Pseudo-label threshold for a source whose relative reliability is
 * `gamma_num / gamma_den` (smoothed dominance counts).
 *
 * # Safety
 * `out` must be writable.
 */
enum CollisStatus collis_threshold(double delta0,
                                   double beta,
                                   uint64_t gamma_num,
                                   uint64_t gamma_den,
                                   double *out);

/**
 * Runs a full training job from a JSON run configuration, writing the
 * metrics log and checkpoints to the configured output directory.
 *
 * # Safety
 * `config_json` must be a NUL-terminated UTF-8 string.
 */
enum CollisStatus collis_train(const char *config_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COLLIS_H */
