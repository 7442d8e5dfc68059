#ifndef FILTNORM_H
#define FILTNORM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum FiltnormStatus {
  FILTNORM_STATUS_OK = 0,
  FILTNORM_STATUS_NULL_POINTER = 1,
  FILTNORM_STATUS_INVALID_ARGUMENT = 2,
  FILTNORM_STATUS_SHAPE_MISMATCH = 3,
  FILTNORM_STATUS_DEGENERATE_SLICE = 4,
  /*
   `backward` was called before a training forward.
   */
  FILTNORM_STATUS_NO_FORWARD = 5,
  FILTNORM_STATUS_INTERNAL = 6,
} FiltnormStatus;

/*
 Normalization variant of a layer.
 */
typedef enum FiltnormKind {
  FILTNORM_KIND_BN = 0,
  FILTNORM_KIND_FBN = 1,
  FILTNORM_KIND_GN = 2,
  FILTNORM_KIND_FGN = 3,
} FiltnormKind;

typedef enum FiltnormGradMode {
  FILTNORM_GRAD_MODE_EXACT = 0,
  FILTNORM_GRAD_MODE_PAPER = 1,
} FiltnormGradMode;

/*
 Opaque layer state: configuration, affine parameters, running statistics
 and the cache of the latest training forward.
 */
typedef struct FiltnormLayer FiltnormLayer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Creates a layer over `channels` channels with unit scale and zero shift.

 `t_sigma` is ignored by the unfiltered kinds and `num_groups` by the batch
 kinds. A non-positive `epsilon` selects the default.

 # Safety
 `out` must be valid for writing one pointer.
 */
enum FiltnormStatus filtnorm_layer_new(enum FiltnormKind kind,
                                       size_t channels,
                                       double t_sigma,
                                       size_t num_groups,
                                       double epsilon,
                                       struct FiltnormLayer **out);

/*
 Releases a layer. Null is ignored.

 # Safety
 `layer` must come from [`filtnorm_layer_new`] and not be used afterwards.
 */
void filtnorm_layer_free(struct FiltnormLayer *layer);

/*
 # Safety
 `layer` must be a live handle.
 */
enum FiltnormStatus filtnorm_layer_set_grad_mode(struct FiltnormLayer *layer,
                                                 enum FiltnormGradMode mode);

/*
 Replaces the scale and shift; both arrays hold `channels` values.

 # Safety
 `layer` must be a live handle; `gamma` and `beta` must be readable for
 `channels` doubles.
 */
enum FiltnormStatus filtnorm_layer_set_affine(struct FiltnormLayer *layer,
                                              const double *gamma,
                                              const double *beta,
                                              size_t channels);

/*
 Training-mode forward. Updates the running statistics of batch kinds and
 keeps the cache for [`filtnorm_layer_backward`].

 # Safety
 `shape` must be readable for `rank` values; `x` and `y` must hold the
 product of `shape` doubles.
 */
enum FiltnormStatus filtnorm_layer_forward_train(struct FiltnormLayer *layer,
                                                 const double *x,
                                                 const size_t *shape,
                                                 size_t rank,
                                                 double *y);

/*
 Gradients of the latest training forward. `dy` and `dx` have its shape;
 `dgamma` and `dbeta` hold one value per channel.

 # Safety
 All arrays must be valid for the sizes above.
 */
enum FiltnormStatus filtnorm_layer_backward(struct FiltnormLayer *layer,
                                            const double *dy,
                                            double *dx,
                                            double *dgamma,
                                            double *dbeta);

/*
 Inference-mode forward using the running statistics.

 # Safety
 As for [`filtnorm_layer_forward_train`].
 */
enum FiltnormStatus filtnorm_layer_forward_infer(struct FiltnormLayer *layer,
                                                 const double *x,
                                                 const size_t *shape,
                                                 size_t rank,
                                                 double *y);

/*
 Copies the running mean and biased variance, `channels` values each.

 # Safety
 `mean` and `var` must be writable for `channels` doubles.
 */
enum FiltnormStatus filtnorm_layer_running_stats(struct FiltnormLayer *layer,
                                                 double *mean,
                                                 double *var,
                                                 size_t channels);

/*
 Number of elements excluded by the mask of the latest training forward.

 # Safety
 `out` must be writable.
 */
enum FiltnormStatus filtnorm_layer_num_masked(struct FiltnormLayer *layer, size_t *out);

/*
 Two-sided standard normal tail probability `P(|Z| > z)`.
 */
double filtnorm_gaussian_tail_probability(double z);

/*
 Message of the calling thread's most recent failure, or null after a
 success. Valid until the next call on the same thread.
 */
const char *filtnorm_last_error(void);

/*
 Name of a layer kind as a static string.
 */
const char *filtnorm_kind_name(enum FiltnormKind kind);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FILTNORM_H */
