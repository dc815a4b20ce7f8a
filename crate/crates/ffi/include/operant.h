#ifndef OPERANT_H
#define OPERANT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum OperantStatus {
  OPERANT_STATUS_OK = 0,
  OPERANT_STATUS_NULL_POINTER = 1,
  OPERANT_STATUS_INVALID_ARGUMENT = 2,
  OPERANT_STATUS_IO = 3,
  OPERANT_STATUS_NUMERICAL = 4,
  OPERANT_STATUS_PANIC = 5,
} OperantStatus;

/**
 * Opaque model handle.
 */
typedef struct OperantModel OperantModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len - 1` bytes) and returns the full message
 * length in bytes. Passing a null `buf` only queries the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t operant_last_error_message(char *buf, uintptr_t len);

/**
 * Loads a JSON checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OperantStatus operant_model_load(const char *path, struct OperantModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`operant_model_load`] and not be used afterwards.
 */
void operant_model_free(struct OperantModel *model);

/**
 * Writes the sensor count, coordinate dimension and parameter count.
 *
 * # Safety
 * `model` must be a live handle; each output must be valid or null.
 */
enum OperantStatus operant_model_shape(const struct OperantModel *model,
                                       uintptr_t *sensors,
                                       uintptr_t *coord_dim,
                                       uintptr_t *n_params);

/**
 * Evaluates `G(u)(y_j)` for `n` query points. `u` holds `m` sensor values,
 * `y` holds `n` points of `coord_dim` coordinates each (row-major), and
 * `out` receives `n` values.
 *
 * # Safety
 * All pointers must be valid for the given lengths.
 */
enum OperantStatus operant_predict(const struct OperantModel *model,
                                   const double *u,
                                   uintptr_t m,
                                   const double *y,
                                   uintptr_t n,
                                   double *out);

/**
 * Kernel-guided weights `λ_k = (max_j h_j / h_k)^α`. `clamped`, when not
 * null, receives the number of entries raised to the floor.
 *
 * # Safety
 * `diag` and `out` must hold `n` values; `clamped` must be valid or null.
 */
enum OperantStatus operant_ntk_weights(const double *diag,
                                       uintptr_t n,
                                       double alpha,
                                       double *out,
                                       uintptr_t *clamped);

/**
 * `‖pred − truth‖ / ‖truth‖`.
 *
 * # Safety
 * `pred` and `truth` must hold `n` values and `out` must be valid.
 */
enum OperantStatus operant_relative_l2(const double *pred,
                                       const double *truth,
                                       uintptr_t n,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPERANT_H */
