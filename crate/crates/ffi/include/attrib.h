#ifndef ATTRIB_H
#define ATTRIB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ATTRIB_STATUS_OK = 0,
  ATTRIB_STATUS_NULL_POINTER = 1,
  ATTRIB_STATUS_INVALID_UTF8 = 2,
  ATTRIB_STATUS_INVALID_ARGUMENT = 3,
  ATTRIB_STATUS_IO = 4,
  ATTRIB_STATUS_DECODE = 5,
  ATTRIB_STATUS_CHECKPOINT = 6,
  ATTRIB_STATUS_INSUFFICIENT_DATA = 7,
  ATTRIB_STATUS_BUFFER_TOO_SMALL = 8,
  ATTRIB_STATUS_TRAINING = 9,
  ATTRIB_STATUS_INTERNAL = 10,
} AttribStatus;

/**
 * A loaded classifier checkpoint.
 */
typedef struct AttribCheckpoint AttribCheckpoint;

/**
 * A confusion matrix with its row and column normalizations.
 */
typedef struct AttribConfusion AttribConfusion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *attrib_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *attrib_version(void);

/**
 * Frees a string returned through a `char **` out-parameter. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void attrib_string_free(char *s);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
AttribStatus attrib_checkpoint_load(const char *path, AttribCheckpoint **out);

/**
 * # Safety
 * `h` must come from [`attrib_checkpoint_load`] and not have been freed.
 */
void attrib_checkpoint_free(AttribCheckpoint *h);

/**
 * # Safety
 * `h` must be a live checkpoint handle; `out` must be writable.
 */
AttribStatus attrib_checkpoint_n_classes(const AttribCheckpoint *h, size_t *out);

/**
 * Borrowed label of class `index`, valid while the handle lives; null if
 * out of range.
 *
 * # Safety
 * `h` must be a live checkpoint handle.
 */
const char *attrib_checkpoint_label(const AttribCheckpoint *h, size_t index);

/**
 * Classifies one PNG or PPM image. Writes the predicted class to
 * `out_class` and, if `posteriors` is non-null, `n_classes` probabilities.
 *
 * # Safety
 * `h` must be a live handle, `image_path` NUL-terminated, `out_class`
 * writable and `posteriors` either null or valid for `len` doubles.
 */
AttribStatus attrib_checkpoint_predict_file(const AttribCheckpoint *h,
                                            const char *image_path,
                                            size_t *out_class,
                                            double *posteriors,
                                            size_t len);

/**
 * Builds a matrix from `n * n` row-major counts (rows are true classes).
 *
 * # Safety
 * `counts` must be valid for `n * n` values; `out` must be writable.
 */
AttribStatus attrib_confusion_from_counts(const uint64_t *counts, size_t n, AttribConfusion **out);

/**
 * # Safety
 * `h` must come from [`attrib_confusion_from_counts`] and not have been freed.
 */
void attrib_confusion_free(AttribConfusion *h);

/**
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
AttribStatus attrib_confusion_accuracy(const AttribConfusion *h, double *out);

/**
 * Row-normalized percentages, row-major into `out[0..n*n]`.
 *
 * # Safety
 * `h` must be a live handle; `out` valid for `len` doubles.
 */
AttribStatus attrib_confusion_recall(const AttribConfusion *h, double *out, size_t len);

/**
 * Column-normalized percentages, row-major into `out[0..n*n]`.
 *
 * # Safety
 * `h` must be a live handle; `out` valid for `len` doubles.
 */
AttribStatus attrib_confusion_precision(const AttribConfusion *h, double *out, size_t len);

/**
 * The zero-shot attribution prompt for `n` candidate names.
 *
 * # Safety
 * `candidates` must hold `n` NUL-terminated strings; `out` must be writable.
 */
AttribStatus attrib_zero_shot_prompt(const char *const *candidates, size_t n, char **out);

/**
 * The yes/no domain question for `domain`.
 *
 * # Safety
 * `domain` must be NUL-terminated; `out` must be writable.
 */
AttribStatus attrib_domain_question(const char *domain, char **out);

/**
 * Runs the experiment described by a TOML config file and writes its
 * report. `out_dir` may be null to use the config's own output directory.
 * The run directory is returned through `out_run_dir` when non-null.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed.
 */
AttribStatus attrib_run_experiment(const char *config_path,
                                   const char *out_dir,
                                   char **out_run_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTRIB_H */
