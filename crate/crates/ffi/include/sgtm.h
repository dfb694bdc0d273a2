#ifndef SGTM_H
#define SGTM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum SgtmStatus {
  SGTM_STATUS_OK = 0,
  SGTM_STATUS_NULL_POINTER = 1,
  SGTM_STATUS_INVALID_ARGUMENT = 2,
  SGTM_STATUS_IO = 3,
  // Corrupt or incompatible file.
  SGTM_STATUS_FORMAT = 4,
  // Operation not valid for this model, e.g. ablating a model without a
  // partition.
  SGTM_STATUS_CONTRACT = 5,
  SGTM_STATUS_SHAPE = 6,
  SGTM_STATUS_PANIC = 7,
  SGTM_STATUS_OTHER = 8,
} SgtmStatus;

// A loaded checkpoint. Opaque to C.
typedef struct SgtmModel SgtmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a
// successful one. Valid until the next call on the same thread.
const char *sgtm_last_error_message(void);

// Loads a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` valid for one write.
enum SgtmStatus sgtm_model_load(const char *path, struct SgtmModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`sgtm_model_load`] not yet freed.
void sgtm_model_free(struct SgtmModel *model);

// Parameter count of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t sgtm_model_num_params(const struct SgtmModel *model);

// Zeroes the forget parameters in place. Fails with `Contract` for a
// model trained without a partition.
//
// # Safety
// `model` must be a live handle.
enum SgtmStatus sgtm_model_ablate(struct SgtmModel *model);

// Mean next-token loss in nats over `n_seqs` sequences stored back to
// back in `tokens`, the i-th of length `lens[i]`.
//
// # Safety
// `tokens` must hold `sum(lens)` ids, `lens` `n_seqs` lengths and
// `out_loss` be valid for one write.
enum SgtmStatus sgtm_model_forward_loss(const struct SgtmModel *model,
                                        const uint32_t *tokens,
                                        const size_t *lens,
                                        size_t n_seqs,
                                        double *out_loss);

// Fits `loss = alpha * compute^(-beta)` by least squares in log space.
//
// # Safety
// `compute` and `loss` must hold `n` values; the outputs must be valid
// for one write each.
enum SgtmStatus sgtm_fit_scaling(const double *compute,
                                 const double *loss,
                                 size_t n,
                                 double *out_alpha,
                                 double *out_beta,
                                 double *out_rmse_log);

// `1 - C_equiv / full_compute`, where `C_equiv` is the compute at which
// the fitted curve reaches `loss`.
//
// # Safety
// `out` must be valid for one write.
enum SgtmStatus sgtm_compute_penalty(double loss,
                                     double alpha,
                                     double beta,
                                     double full_compute,
                                     double *out);

// Leakage of a run with `forget_loss` that saw `undiscovered_tokens`
// forget tokens, against `n` baseline points `(tokens[i], losses[i])`.
// When the loss lies outside the curve `*out_leakage` is NaN and the
// bounds give the interval known to contain it.
//
// # Safety
// `tokens` and `losses` must hold `n` values; the outputs must be valid
// for one write each.
enum SgtmStatus sgtm_leakage(double forget_loss,
                             double undiscovered_tokens,
                             const double *tokens,
                             const double *losses,
                             size_t n,
                             double *out_leakage,
                             double *out_lower,
                             double *out_upper);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGTM_H */
