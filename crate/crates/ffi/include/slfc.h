#ifndef SLFC_H
#define SLFC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum SlfcStatus {
  SLFC_STATUS_OK = 0,
  SLFC_STATUS_NULL_POINTER = 1,
  /*
   A length or argument disagrees with the model or the contract.
   */
  SLFC_STATUS_INVALID_ARGUMENT = 2,
  /*
   A computation produced a non-finite or degenerate value.
   */
  SLFC_STATUS_NUMERIC = 3,
  SLFC_STATUS_IO = 4,
  /*
   A file or string is not a valid checkpoint.
   */
  SLFC_STATUS_PARSE = 5,
  /*
   An internal invariant failed; the message has details.
   */
  SLFC_STATUS_INTERNAL = 6,
} SlfcStatus;

/*
 A loaded model. Create with [`slfc_model_load`] or
 [`slfc_model_from_json`], release with [`slfc_model_free`].
 */
typedef struct SlfcModel SlfcModel;

/*
 Sizes of a model's inputs and outputs.
 */
typedef struct SlfcDims {
  size_t obs_dim;
  size_t action_dim;
  size_t latent_dim;
  size_t num_skills;
} SlfcDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a model checkpoint from `path` into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum SlfcStatus slfc_model_load(const char *path, struct SlfcModel **out);

/*
 Parses a model checkpoint held in memory.

 # Safety
 `json` must be a NUL-terminated string and `out` valid for one write.
 */
enum SlfcStatus slfc_model_from_json(const char *json, struct SlfcModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void slfc_model_free(struct SlfcModel *model);

/*
 # Safety
 `model` must be a live handle and `out` valid for one write.
 */
enum SlfcStatus slfc_model_dims(const struct SlfcModel *model, struct SlfcDims *out);

/*
 Mean and variance of the latent state given one observation.

 # Safety
 Buffers must be valid for their stated lengths.
 */
enum SlfcStatus slfc_model_encode(const struct SlfcModel *model,
                                  const double *obs,
                                  size_t obs_len,
                                  double *mean_out,
                                  double *var_out,
                                  size_t latent_len);

/*
 One control step: encode, pick the most probable skill, apply its
 feedback law. `noise` may be null to act on the latent mean; otherwise
 it holds `latent_dim` standard-normal draws.

 # Safety
 Buffers must be valid for their stated lengths; `skill_out` may be null.
 */
enum SlfcStatus slfc_model_act(const struct SlfcModel *model,
                               const double *obs,
                               size_t obs_len,
                               const double *noise,
                               size_t noise_len,
                               double *action_out,
                               size_t action_len,
                               size_t *skill_out);

/*
 Posterior probability of every skill given a latent state and action.

 # Safety
 Buffers must be valid for their stated lengths.
 */
enum SlfcStatus slfc_model_posterior_skill(const struct SlfcModel *model,
                                           const double *z,
                                           size_t z_len,
                                           const double *u,
                                           size_t u_len,
                                           double *probs_out,
                                           size_t probs_len);

/*
 Discrete Fréchet distance between two paths of `dim`-vectors stored as
 `a_points x dim` and `b_points x dim` row-major arrays.

 # Safety
 Buffers must be valid for their stated lengths and `out` for one write.
 */
enum SlfcStatus slfc_frechet_distance(const double *a,
                                      size_t a_points,
                                      const double *b,
                                      size_t b_points,
                                      size_t dim,
                                      double *out);

/*
 Rewrites a linear layer `W z + b` (`W` is `action_dim x latent_dim`) as
 the feedback law `K (g - z)`. Writes `K` (`action_dim x latent_dim`),
 `g` (`latent_dim`) and the part of `b` outside the range of `W`
 (`action_dim`, zero when exact).

 # Safety
 Buffers must be valid for their stated lengths.
 */
enum SlfcStatus slfc_layer_to_controller(const double *weight,
                                         const double *bias,
                                         size_t action_dim,
                                         size_t latent_dim,
                                         double *gain_out,
                                         double *goal_out,
                                         double *residual_out);

/*
 Copies the calling thread's last error message into `buf` (truncated,
 always NUL-terminated when `len > 0`) and returns the full message
 length in bytes, excluding the terminator. Empty after a successful call.

 # Safety
 `buf` must be null or valid for `len` writes.
 */
size_t slfc_last_error_message(char *buf, size_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *slfc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLFC_H */
