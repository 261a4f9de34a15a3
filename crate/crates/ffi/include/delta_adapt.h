#ifndef DELTA_ADAPT_H
#define DELTA_ADAPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Codes 2 to 5 match the command-line exit codes.
 */
typedef enum DaStatus {
  DaStatus_Ok = 0,
  DaStatus_NullPointer = 1,
  DaStatus_Config = 2,
  DaStatus_Data = 3,
  DaStatus_Io = 4,
  DaStatus_Checkpoint = 5,
  DaStatus_Dimension = 6,
  DaStatus_Internal = 7,
  DaStatus_Panic = 8,
} DaStatus;

typedef enum DaPlacement {
  DaPlacement_Input = 0,
  DaPlacement_Output = 1,
} DaPlacement;

typedef enum DaForm {
  DaForm_Additive = 0,
  DaForm_Multiplicative = 1,
  DaForm_Exp = 2,
} DaForm;

/**
 * A frozen backbone forecaster.
 */
typedef struct DaBackbone DaBackbone;

/**
 * A trained or freshly initialized model bound to one backbone.
 */
typedef struct DaModel DaModel;

/**
 * Window geometry of a backbone.
 */
typedef struct DaShapes {
  uintptr_t lookback;
  uintptr_t covariates;
  uintptr_t horizon;
  uintptr_t targets;
} DaShapes;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *da_version(void);

/**
 * Copies the calling thread's last error message into `buf` and returns
 * the length it needs including the NUL, or 0 when there is no error.
 * Nothing is written when `cap` is too small.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
uintptr_t da_last_error(char *buf, uintptr_t cap);

/**
 * Loads a backbone checkpoint, verifying its checksum.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DaStatus da_backbone_load(const char *path, struct DaBackbone **out);

/**
 * Releases a backbone; null is ignored.
 *
 * # Safety
 * `h` must come from [`da_backbone_load`] and not be used afterwards.
 */
void da_backbone_free(struct DaBackbone *h);

/**
 * # Safety
 * `h` must be a live backbone handle and `out` a valid pointer.
 */
enum DaStatus da_backbone_shapes(const struct DaBackbone *h, struct DaShapes *out);

/**
 * Writes the hex SHA-256 checksum of the backbone parameters into `buf`
 * and stores the needed length (including the NUL) in `needed`.
 *
 * # Safety
 * `h` must be a live backbone handle; `buf` null or valid for `cap` bytes;
 * `needed` null or valid.
 */
enum DaStatus da_backbone_checksum(const struct DaBackbone *h,
                                   char *buf,
                                   uintptr_t cap,
                                   uintptr_t *needed);

/**
 * Frozen forecast of one context.
 *
 * # Safety
 * `h` must be a live backbone handle; `x` valid for `x_len` reads and `y`
 * for `y_len` writes.
 */
enum DaStatus da_backbone_predict(const struct DaBackbone *h,
                                  const double *x,
                                  uintptr_t x_len,
                                  double *y,
                                  uintptr_t y_len);

/**
 * A fresh adapter around `backbone`; at initialization it reproduces the
 * backbone's forecasts exactly.
 *
 * # Safety
 * `backbone` must be a live handle and `out` a valid pointer.
 */
enum DaStatus da_adapter_new(const struct DaBackbone *backbone,
                             enum DaPlacement placement,
                             enum DaForm form,
                             double delta,
                             uint64_t seed,
                             struct DaModel **out);

/**
 * Loads a model checkpoint written for `backbone`; a checkpoint recorded
 * against a different backbone is rejected with `Checkpoint`.
 *
 * # Safety
 * `backbone` must be a live handle, `path` NUL-terminated, `out` valid.
 */
enum DaStatus da_model_load(const struct DaBackbone *backbone,
                            const char *path,
                            struct DaModel **out);

/**
 * Saves a model together with its backbone's checksum.
 *
 * # Safety
 * Both handles must be live and `path` NUL-terminated.
 */
enum DaStatus da_model_save(const struct DaModel *model,
                            const struct DaBackbone *backbone,
                            const char *path);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `h` must come from this library and not be used afterwards.
 */
void da_model_free(struct DaModel *h);

/**
 * Adapted point forecast of one context. Calibrators and selectors return
 * their point forecast.
 *
 * # Safety
 * Both handles must be live; `x` valid for `x_len` reads and `y` for
 * `y_len` writes.
 */
enum DaStatus da_model_predict(const struct DaModel *model,
                               const struct DaBackbone *backbone,
                               const double *x,
                               uintptr_t x_len,
                               double *y,
                               uintptr_t y_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTA_ADAPT_H */
