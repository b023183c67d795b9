#ifndef SANE_H
#define SANE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SaneStatus {
  SANE_STATUS_OK = 0,
  SANE_STATUS_NULL_POINTER = 1,
  SANE_STATUS_INVALID_ARGUMENT = 2,
  SANE_STATUS_SHAPE_MISMATCH = 3,
  SANE_STATUS_NON_FINITE = 4,
  SANE_STATUS_BACKEND_UNAVAILABLE = 5,
  SANE_STATUS_BACKEND = 6,
  SANE_STATUS_PIPELINE = 7,
  SANE_STATUS_PANIC = 8,
} SaneStatus;

/**
 * Opaque editing backend.
 */
typedef struct SaneBackend SaneBackend;

/**
 * Opaque result of [`sane_edit`]: RGB8 pixels plus the manifest JSON.
 */
typedef struct SaneEdit SaneEdit;

typedef struct SaneWeights {
  float w_image;
  float w_text;
  float w_specific;
} SaneWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *sane_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sane_version(void);

struct SaneWeights sane_default_weights(void);

/**
 * Creates the deterministic mock backend with the given downscale factor.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SaneStatus sane_backend_new_mock(uint32_t downscale, struct SaneBackend **out);

/**
 * Creates a backend from a JSON spec such as `{"id": "mock", "downscale": 8}`.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string; `out` must be writable.
 */
enum SaneStatus sane_backend_open(const char *spec_json, struct SaneBackend **out);

/**
 * # Safety
 * `backend` must be null or a handle from a `sane_backend_*` constructor
 * that has not been freed.
 */
void sane_backend_free(struct SaneBackend *backend);

/**
 * Guided estimate `u + w_image (i - u) + w_text (f - i)`.
 *
 * # Safety
 * `uncond`, `image`, `full` and `out` must each point to `c * h * w` floats.
 */
enum SaneStatus sane_cfg_combine(size_t c,
                                 size_t h,
                                 size_t w,
                                 const float *uncond,
                                 const float *image,
                                 const float *full,
                                 struct SaneWeights weights,
                                 float *out);

/**
 * Guided estimate with the masked specific-instruction term.
 *
 * `specifics` holds `n` tensors back to back. `mask_out`, when not null,
 * receives the `h * w` selected instruction indices.
 *
 * # Safety
 * Tensor pointers must cover `c * h * w` floats (`n * c * h * w` for
 * `specifics`); `mask_out` must be null or cover `h * w` values.
 */
enum SaneStatus sane_sane_combine(size_t c,
                                  size_t h,
                                  size_t w,
                                  const float *uncond,
                                  const float *image,
                                  const float *full,
                                  const float *specifics,
                                  size_t n,
                                  struct SaneWeights weights,
                                  float *out,
                                  uint32_t *mask_out);

/**
 * Runs one edit.
 *
 * `rgb` is `width * height * 3` bytes, row-major. `strategy` is a name such
 * as `"sane"` or `"baseline"`; `config_json` is an optional JSON edit
 * configuration (null selects the defaults). On success `*out` receives a
 * handle to free with [`sane_edit_free`].
 *
 * # Safety
 * `backend` must be a live handle; `rgb` must cover the image; strings must
 * be NUL-terminated; `specifics` must point to `n_specifics` strings (it may
 * be null when `n_specifics` is 0); `out` must be writable.
 */
enum SaneStatus sane_edit(const struct SaneBackend *backend,
                          const uint8_t *rgb,
                          uint32_t width,
                          uint32_t height,
                          const char *instruction,
                          const char *const *specifics,
                          size_t n_specifics,
                          const char *strategy,
                          const char *config_json,
                          struct SaneEdit **out);

/**
 * # Safety
 * `edit` must be a live handle from [`sane_edit`].
 */
uint32_t sane_edit_width(const struct SaneEdit *edit);

/**
 * # Safety
 * `edit` must be a live handle from [`sane_edit`].
 */
uint32_t sane_edit_height(const struct SaneEdit *edit);

/**
 * RGB8 pixels, `width * height * 3` bytes, owned by the handle.
 *
 * # Safety
 * `edit` must be a live handle from [`sane_edit`].
 */
const uint8_t *sane_edit_pixels(const struct SaneEdit *edit);

/**
 * Manifest JSON, owned by the handle.
 *
 * # Safety
 * `edit` must be a live handle from [`sane_edit`].
 */
const char *sane_edit_manifest_json(const struct SaneEdit *edit);

/**
 * # Safety
 * `edit` must be null or a handle from [`sane_edit`] not yet freed.
 */
void sane_edit_free(struct SaneEdit *edit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SANE_H */
