#ifndef DEFECT_SYNTH_H
#define DEFECT_SYNTH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Surface family for [`ds_texture_synthesize`].
 */
typedef enum DsDomain {
  DS_DOMAIN_SURFACE_A = 0,
  DS_DOMAIN_SURFACE_B = 1,
} DsDomain;

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_SHAPE_MISMATCH = 3,
  DS_STATUS_IO = 4,
  DS_STATUS_FORMAT = 5,
  DS_STATUS_DATA = 6,
  DS_STATUS_NON_FINITE = 7,
  DS_STATUS_NO_CONVERGENCE = 8,
  DS_STATUS_UNCALIBRATED = 9,
  DS_STATUS_PANIC = 10,
} DsStatus;

/*
 Trained denoiser, schedule and autoencoder.
 */
typedef struct DsCheckpoint DsCheckpoint;

/*
 Learned concept vector.
 */
typedef struct DsEmbedding DsEmbedding;

/*
 Channel-major `f32` image with values in `[0, 1]`.
 */
typedef struct DsImage DsImage;

/*
 Binary mask; nonzero bytes are inside.
 */
typedef struct DsMask DsMask;

/*
 Half-open box `[x_min, x_max) × [y_min, y_max)` on image `image`.
 */
typedef struct DsBox {
  uint32_t image;
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} DsBox;

typedef struct DsDetection {
  struct DsBox bbox;
  double confidence;
} DsDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL after a
 successful call. The pointer stays valid until the next call on the same
 thread.
 */
const char *ds_last_error_message(void);

/*
 Copy `channels * height * width` floats from `data` into a new image.

 # Safety
 `data` must point to that many readable floats; `out` must be writable.
 */
enum DsStatus ds_image_new(uintptr_t channels,
                           uintptr_t height,
                           uintptr_t width,
                           const float *data,
                           struct DsImage **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DsStatus ds_image_load_png(const char *path, struct DsImage **out);

/*
 # Safety
 `image` must be a live handle; `path` a NUL-terminated string.
 */
enum DsStatus ds_image_save_png(const struct DsImage *image, const char *path);

/*
 # Safety
 `image` must be a live handle; the out pointers may be NULL.
 */
enum DsStatus ds_image_shape(const struct DsImage *image,
                             uintptr_t *channels,
                             uintptr_t *height,
                             uintptr_t *width);

/*
 Borrowed pointer to the image's channel-major floats, valid while the
 handle lives. NULL for a NULL handle.

 # Safety
 `image` must be NULL or a live handle.
 */
const float *ds_image_data(const struct DsImage *image);

/*
 # Safety
 `image` must be NULL or a handle not yet freed.
 */
void ds_image_free(struct DsImage *image);

/*
 Copy `height * width` bytes (nonzero = inside) into a new mask.

 # Safety
 `data` must point to that many readable bytes; `out` must be writable.
 */
enum DsStatus ds_mask_new(uintptr_t height,
                          uintptr_t width,
                          const uint8_t *data,
                          struct DsMask **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DsStatus ds_mask_load_png(const char *path, struct DsMask **out);

/*
 # Safety
 `mask` must be NULL or a handle not yet freed.
 */
void ds_mask_free(struct DsMask *mask);

/*
 Deterministic procedural background.

 # Safety
 `out` must be writable.
 */
enum DsStatus ds_texture_synthesize(enum DsDomain domain,
                                    uintptr_t height,
                                    uintptr_t width,
                                    uint64_t seed,
                                    struct DsImage **out);

/*
 Gradient-domain blend of `source` into `target` over `mask`, without
 colour matching.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum DsStatus ds_poisson_blend(const struct DsImage *source,
                               const struct DsImage *target,
                               const struct DsMask *mask,
                               struct DsImage **out);

/*
 Colour and lighting matching followed by the gradient-domain blend, with
 default settings.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum DsStatus ds_integrate(const struct DsImage *source,
                           const struct DsImage *background,
                           const struct DsMask *mask,
                           struct DsImage **out);

/*
 Intersection over union of two boxes; 0 when either is invalid or empty.
 The image indices are ignored.

 # Safety
 Both pointers must be NULL or readable.
 */
double ds_iou(const struct DsBox *a, const struct DsBox *b);

/*
 Average precision of `detections` against `ground_truth` at the given IoU
 threshold (all-point interpolation).

 # Safety
 The arrays must hold the stated number of elements; `out` must be
 writable.
 */
enum DsStatus ds_average_precision(const struct DsDetection *detections,
                                   uintptr_t n_detections,
                                   const struct DsBox *ground_truth,
                                   uintptr_t n_ground_truth,
                                   double iou_threshold,
                                   double *out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DsStatus ds_checkpoint_load(const char *path, struct DsCheckpoint **out);

/*
 # Safety
 `checkpoint` must be NULL or a handle not yet freed.
 */
void ds_checkpoint_free(struct DsCheckpoint *checkpoint);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DsStatus ds_embedding_load(const char *path, struct DsEmbedding **out);

/*
 # Safety
 `embedding` must be NULL or a handle not yet freed.
 */
void ds_embedding_free(struct DsEmbedding *embedding);

/*
 Inpaint the concept into `background` under `mask`. `prompt` must contain
 the placeholder `S*`; NULL uses "a photo of S*". The result is the hard
 composite, before integration.

 # Safety
 Handles must be live; `prompt` NULL or NUL-terminated; `out` writable.
 */
enum DsStatus ds_generate(const struct DsCheckpoint *checkpoint,
                          const struct DsEmbedding *embedding,
                          const struct DsImage *background,
                          const struct DsMask *mask,
                          const char *prompt,
                          uint64_t seed,
                          struct DsImage **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEFECT_SYNTH_H */
