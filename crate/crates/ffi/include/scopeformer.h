#ifndef SCOPEFORMER_H
#define SCOPEFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_CONFIG = 3,
  SF_STATUS_DATA = 4,
  SF_STATUS_CHECKPOINT = 5,
  SF_STATUS_RUNTIME = 6,
  SF_STATUS_BUFFER_TOO_SMALL = 7,
  SF_STATUS_PANIC = 8,
} SfStatus;

// Opaque model handle.
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread ("" after a success).
// Valid until the next call on the same thread.
const char *sf_last_error(void);

// Library version as a static NUL-terminated string.
const char *sf_version(void);

// Validates a JSON run config (or bare model section).
//
// # Safety
// `json` must be a NUL-terminated string.
enum SfStatus sf_config_validate(const char *json);

// Shape plan of a config: the fused feature map `[h, w, C]`, token count,
// latent width and total parameter count, without allocating weights.
//
// # Safety
// `json` must be NUL-terminated; `fused` must point to 3 writable values and
// the remaining outputs to one each.
enum SfStatus sf_config_plan(const char *json,
                             uintptr_t *fused,
                             uintptr_t *tokens,
                             uintptr_t *latent_dim,
                             uint64_t *params);

// Builds a freshly initialised model.
//
// # Safety
// `json` must be NUL-terminated and `out` writable. Free the handle with
// [`sf_model_free`].
enum SfStatus sf_model_new(const char *json, struct SfModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`sf_model_new`] and not be used afterwards.
void sf_model_free(struct SfModel *model);

// Loads parameters from a checkpoint written by the trainer. With `force`
// false a config digest mismatch is refused.
//
// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum SfStatus sf_model_load_checkpoint(struct SfModel *model, const char *path, bool force);

// Input side length and label count of a model.
//
// # Safety
// `model` must be a live handle; outputs must be writable.
enum SfStatus sf_model_info(const struct SfModel *model,
                            uintptr_t *image_size,
                            uintptr_t *in_channels,
                            uintptr_t *num_labels);

// Label probabilities `[batch, num_labels]` for images `[batch, S, S, C]`.
//
// # Safety
// `images` must hold `batch·S·S·C` values and `out` `out_len` writable values.
enum SfStatus sf_model_predict(const struct SfModel *model,
                               const double *images,
                               uintptr_t batch,
                               double *out,
                               uintptr_t out_len);

// Parses a DICOM byte stream and windows it into `[rows, cols, 3]` with the
// default windows. Call with `out` NULL to query `rows`/`cols` first.
//
// # Safety
// `bytes` must hold `len` bytes; `rows`/`cols` must be writable.
enum SfStatus sf_dicom_to_image(const uint8_t *bytes,
                                uintptr_t len,
                                double *out,
                                uintptr_t out_len,
                                uintptr_t *rows,
                                uintptr_t *cols);

// Weighted multi-label log loss of `probs` against binary `labels`, both
// `[batch, num_labels]`. `weights` may be NULL for the standard weighting.
//
// # Safety
// Arrays must hold `batch·num_labels` values (`num_labels` for weights).
enum SfStatus sf_weighted_log_loss(const double *probs,
                                   const double *labels,
                                   uintptr_t batch,
                                   uintptr_t num_labels,
                                   const double *weights,
                                   double eps,
                                   double *out);

// Reads an `.sfi` sample. Call with `out` NULL to query `dims` (H, W, C).
//
// # Safety
// `path` must be NUL-terminated and `dims` point to 3 writable values.
enum SfStatus sf_sfi_read(const char *path, double *out, uintptr_t out_len, uintptr_t *dims);

// Writes an `[h, w, c]` image with values in `[0, 1]` as `.sfi`.
//
// # Safety
// `path` must be NUL-terminated and `data` hold `h·w·c` values.
enum SfStatus sf_sfi_write(const char *path,
                           const double *data,
                           uintptr_t h,
                           uintptr_t w,
                           uintptr_t c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCOPEFORMER_H */
