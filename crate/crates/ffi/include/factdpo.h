#ifndef FACTDPO_H
#define FACTDPO_H

/* Generated by cbindgen from the factdpo-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum FdpoStatus {
  FDPO_STATUS_OK = 0,
  FDPO_STATUS_NULL_POINTER = 1,
  FDPO_STATUS_INVALID_UTF8 = 2,
  FDPO_STATUS_INVALID_ARGUMENT = 3,
  FDPO_STATUS_DATA = 4,
  FDPO_STATUS_IO = 5,
  FDPO_STATUS_CORRUPT_CHECKPOINT = 6,
  FDPO_STATUS_BACKEND = 7,
  FDPO_STATUS_PANIC = 8,
} FdpoStatus;

/**
 * Predicted verdict.
 */
typedef enum FdpoLabel {
  FDPO_LABEL_UNPARSED = -1,
  FDPO_LABEL_SUPPORTS = 0,
  FDPO_LABEL_REFUTES = 1,
} FdpoLabel;

/**
 * Opaque handle to a loaded policy.
 */
typedef struct FdpoModel FdpoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fdpo_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to fit).
 * Returns the full message length excluding the terminator; 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fdpo_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint into a new handle stored at `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FdpoStatus fdpo_model_load(const char *path, struct FdpoModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`fdpo_model_load`] not yet freed.
 */
void fdpo_model_free(struct FdpoModel *model);

/**
 * Vocabulary size of the loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum FdpoStatus fdpo_model_vocab_size(const struct FdpoModel *model, size_t *out);

/**
 * Log-probability of `completion` after `prompt`.
 *
 * # Safety
 * `model` must be a live handle, the strings NUL-terminated and `out` a valid pointer.
 */
enum FdpoStatus fdpo_model_logprob(const struct FdpoModel *model,
                                   const char *prompt,
                                   const char *completion,
                                   double *out);

/**
 * Greedy verdict for a claim against newline-separated evidence sentences.
 * `*out_text`, when `out_text` is non-null, receives the decoded text.
 *
 * # Safety
 * `model` must be a live handle, the strings NUL-terminated, `out_label` valid and `out_text`
 * null or valid.
 */
enum FdpoStatus fdpo_model_predict(const struct FdpoModel *model,
                                   const char *claim,
                                   const char *evidence,
                                   size_t max_new_tokens,
                                   enum FdpoLabel *out_label,
                                   char **out_text);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void fdpo_string_free(char *s);

/**
 * `−ln σ(β·margin)` for one pair of policy and reference log-probabilities.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FdpoStatus fdpo_dpo_loss(double lp_theta_chosen,
                              double lp_ref_chosen,
                              double lp_theta_rejected,
                              double lp_ref_rejected,
                              double beta,
                              double *out);

/**
 * Constrained objective for one pair.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FdpoStatus fdpo_improved_dpo_loss(double lp_theta_chosen,
                                       double lp_ref_chosen,
                                       double lp_theta_rejected,
                                       double lp_ref_rejected,
                                       double beta,
                                       double a1,
                                       double a2,
                                       double mu1,
                                       double mu2,
                                       double *out);

/**
 * One multiplier update in place.
 *
 * # Safety
 * `mu1` and `mu2` must be valid pointers.
 */
enum FdpoStatus fdpo_update_multipliers(double *mu1,
                                        double *mu2,
                                        double c_chosen,
                                        double c_rejected,
                                        double lr_mu);

/**
 * Number of pairs drawn for a record answered correctly `w` times out of `k`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FdpoStatus fdpo_sample_count(size_t w, size_t k, size_t n_min, size_t n_base, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACTDPO_H */
