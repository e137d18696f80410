/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SVASTIN_H
#define SVASTIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_ARGUMENT = 2,
  SV_STATUS_SHAPE = 3,
  SV_STATUS_CONFIG = 4,
  SV_STATUS_PRECONDITION = 5,
  SV_STATUS_NOT_DIFFERENTIABLE = 6,
  SV_STATUS_NUMERIC = 7,
  SV_STATUS_IO = 8,
  SV_STATUS_FORMAT = 9,
  SV_STATUS_CALLBACK = 10,
  SV_STATUS_PANIC = 11,
} SvStatus;

// Outcome of one attack.
typedef struct SvAttackResult SvAttackResult;

// A model that can be attacked.
typedef struct SvClassifier SvClassifier;

// A video or coefficient tensor.
typedef struct SvVideo SvVideo;

// `logits_out` has room for `num_classes` values. Return 0 on success.
typedef int (*SvLogitsCallback)(void *user_data,
                                const float *video,
                                const size_t *shape,
                                float *logits_out,
                                size_t num_classes);

// Writes the gradient of a scalar loss with respect to `video` into
// `grad_out` (same length as `video`), given its gradient with respect to
// the logits. Return 0 on success.
typedef int (*SvVjpCallback)(void *user_data,
                             const float *video,
                             const size_t *shape,
                             const float *grad_logits,
                             size_t num_classes,
                             float *grad_out);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Owned by the library.
const char *sv_last_error_message(void);

// Library version as a static string.
const char *sv_version(void);

// Copies `c*t*w*h` floats from `data` into a new video.
//
// # Safety
// `data` must point to `c*t*w*h` readable floats and `out` must be writable.
enum SvStatus sv_video_new(size_t c,
                           size_t t,
                           size_t w,
                           size_t h,
                           const float *data,
                           struct SvVideo **out);

// # Safety
// `v` must be null or a handle from this library not yet freed.
void sv_video_free(struct SvVideo *v);

// Writes `[C, T, W, H]` into `shape_out`.
//
// # Safety
// `shape_out` must have room for 4 values.
enum SvStatus sv_video_shape(const struct SvVideo *v, size_t *shape_out);

// Borrowed pointer to the samples, valid while `v` lives.
//
// # Safety
// `data_out` and `len_out` must be writable.
enum SvStatus sv_video_data(const struct SvVideo *v, const float **data_out, size_t *len_out);

// # Safety
// `path` must be a NUL-terminated string.
enum SvStatus sv_video_read_raw(const char *path, struct SvVideo **out);

// # Safety
// `path` must be a NUL-terminated string.
enum SvStatus sv_video_write_raw(const struct SvVideo *v, const char *path);

// One-level 3D Haar transform: `[C, T, W, H]` to `[8C, T/2, W/2, H/2]`.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum SvStatus sv_dwt3d_forward(const struct SvVideo *v, struct SvVideo **out);

// # Safety
// Handles must be valid; `out` must be writable.
enum SvStatus sv_dwt3d_inverse(const struct SvVideo *coeffs, struct SvVideo **out);

// Loads a toy CNN checkpoint written by `svastin train-victim`.
//
// # Safety
// `path` must be a NUL-terminated string.
enum SvStatus sv_classifier_load(const char *path, struct SvClassifier **out);

// Wraps caller-provided inference. Inputs reaching the callbacks are the
// raw `[0, 1]` videos; `vjp` may be null for a model that cannot be
// attacked with gradients. The callbacks may be invoked from any thread
// and must stay valid, together with `user_data`, until the handle is freed.
//
// # Safety
// See above; `shape` must hold 4 values.
enum SvStatus sv_classifier_from_callbacks(size_t num_classes,
                                           const size_t *shape,
                                           SvLogitsCallback logits,
                                           SvVjpCallback vjp,
                                           void *user_data,
                                           struct SvClassifier **out);

// # Safety
// `f` must be null or a handle from this library not yet freed.
void sv_classifier_free(struct SvClassifier *f);

// # Safety
// `num_classes_out` must be writable.
enum SvStatus sv_classifier_num_classes(const struct SvClassifier *f, size_t *num_classes_out);

// Writes `len` logits, which must equal the class count.
//
// # Safety
// `logits_out` must have room for `len` floats.
enum SvStatus sv_classifier_logits(const struct SvClassifier *f,
                                   const struct SvVideo *v,
                                   float *logits_out,
                                   size_t len);

// Runs one targeted attack. `config_toml` uses the `[attack]` table of the
// CLI config format and may be null for defaults.
//
// # Safety
// Handles must be valid; `config_toml` null or NUL-terminated.
enum SvStatus sv_attack_run(const struct SvVideo *x_c,
                            const struct SvVideo *x_g,
                            size_t target,
                            const struct SvClassifier *f,
                            const char *config_toml,
                            struct SvAttackResult **out);

// # Safety
// `r` must be null or a handle from this library not yet freed.
void sv_result_free(struct SvAttackResult *r);

// # Safety
// Output pointers must be writable.
enum SvStatus sv_result_summary(const struct SvAttackResult *r,
                                bool *success_out,
                                size_t *epochs_out,
                                double *confidence_out);

// Copies the quantized adversarial video into a new handle.
//
// # Safety
// `out` must be writable.
enum SvStatus sv_result_adversarial(const struct SvAttackResult *r, struct SvVideo **out);

// Result record as JSON; release with [`sv_string_free`].
//
// # Safety
// `out` must be writable.
enum SvStatus sv_result_json(const struct SvAttackResult *r, char **out);

// # Safety
// `s` must be null or a string returned by this library.
void sv_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVASTIN_H */
