#ifndef HCR_H
#define HCR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Model kinds as exposed to C.
 */
#define HCR_MODEL_CTS_RNN 0

#define HCR_MODEL_NOTES_HCR 1

#define HCR_MODEL_MM_HCR 2

/**
 * Result code of every exported function.
 */
typedef enum {
  HCR_STATUS_OK = 0,
  HCR_STATUS_NULL_POINTER = 1,
  HCR_STATUS_INVALID_ARGUMENT = 2,
  HCR_STATUS_CONFIG = 3,
  HCR_STATUS_MISSING_ARTIFACT = 4,
  HCR_STATUS_SHAPE = 5,
  HCR_STATUS_UNDEFINED_METRIC = 6,
  HCR_STATUS_IO = 7,
  HCR_STATUS_CORRUPT_DATA = 8,
  HCR_STATUS_PANIC = 9,
  HCR_STATUS_OTHER = 10,
} HcrStatus;

/**
 * Pretrained word embeddings.
 */
typedef struct HcrEmbeddings HcrEmbeddings;

/**
 * Trained model parameters.
 */
typedef struct HcrModel HcrModel;

/**
 * Owned NUL-terminated string.
 */
typedef struct HcrString HcrString;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *hcr_last_error_message(void);

/**
 * Area under the ROC curve. `labels[i]` is nonzero for a positive.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable values; `out_value` must be writable.
 */
HcrStatus hcr_auroc(const double *scores, const uint8_t *labels, size_t n, double *out_value);

/**
 * Step-wise average precision.
 *
 * # Safety
 * As for [`hcr_auroc`].
 */
HcrStatus hcr_auprc(const double *scores, const uint8_t *labels, size_t n, double *out_value);

/**
 * One-tailed paired t-test of `b > a`. `t_out` receives NaN when the
 * differences have zero variance.
 *
 * # Safety
 * `a` and `b` must point to `n` readable values; `t_out` and `p_out` must be writable.
 */
HcrStatus hcr_paired_ttest(const double *a,
                           const double *b,
                           size_t n,
                           double *t_out,
                           double *p_out);

/**
 * Normalises a note: lowercase, de-identification spans replaced, whitespace collapsed.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_string` must be writable.
 */
HcrStatus hcr_clean_text(const char *text, HcrString **out_string);

/**
 * Borrowed pointer to the contents of `s`, valid until `s` is freed.
 *
 * # Safety
 * `s` must be null or a live handle from this library.
 */
const char *hcr_string_ptr(const HcrString *s);

/**
 * # Safety
 * `s` must be null or a handle not yet freed.
 */
void hcr_string_free(HcrString *s);

/**
 * Loads word embeddings written by `hcr embed`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_handle` must be writable.
 */
HcrStatus hcr_embeddings_load(const char *path, HcrEmbeddings **out_handle);

/**
 * Number of rows (vocabulary entries including padding) and the vector dimension.
 *
 * # Safety
 * `e` must be a live handle; `rows` and `dim` must be writable.
 */
HcrStatus hcr_embeddings_shape(const HcrEmbeddings *e, size_t *rows, size_t *dim);

/**
 * # Safety
 * `e` must be null or a handle not yet freed.
 */
void hcr_embeddings_free(HcrEmbeddings *e);

/**
 * Loads a checkpoint written by `hcr train` (the `.ckpt` path; its `.json`
 * sidecar must sit next to it).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_handle` must be writable.
 */
HcrStatus hcr_model_load(const char *path, HcrModel **out_handle);

/**
 * Model kind (one of the `HCR_MODEL_*` constants), trainable parameter count
 * and note length expected by the model.
 *
 * # Safety
 * `m` must be a live handle; the outputs must be writable.
 */
HcrStatus hcr_model_info(const HcrModel *m,
                         int32_t *kind,
                         size_t *param_count,
                         size_t *note_length);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void hcr_model_free(HcrModel *m);

/**
 * Mortality probability for one stay.
 *
 * Notes are given as `n_notes` token-id runs concatenated in `tokens`, with
 * `note_lengths[i]` ids in note `i`, oldest first. Runs longer than the
 * model's note length are head-truncated. The series is `hours` rows of
 * `variables` raw values (hour `i` is row `i`), NaN where unobserved; it is
 * imputed as in training. Pass null/zero for a modality the model does not use.
 *
 * # Safety
 * Every non-null pointer must reference the stated number of readable values.
 */
HcrStatus hcr_model_predict(const HcrModel *m,
                            const HcrEmbeddings *emb,
                            const uint32_t *tokens,
                            const size_t *note_lengths,
                            size_t n_notes,
                            const double *series,
                            size_t hours,
                            size_t variables,
                            double *probability);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HCR_H */
