#ifndef COMPTRAJ_H
#define COMPTRAJ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_POINTER = 1,
  CT_STATUS_INVALID_ARGUMENT = 2,
  CT_STATUS_IO = 3,
  CT_STATUS_FORMAT = 4,
  CT_STATUS_CONFIG_MISMATCH = 5,
  CT_STATUS_FAILED = 6,
  CT_STATUS_PANIC = 7,
} CtStatus;

// Loaded descriptor codebook.
typedef struct CtCodebook CtCodebook;

// Loaded trajectory hierarchy.
typedef struct CtHierarchy CtHierarchy;

// Loaded LASTDPM detector.
typedef struct CtModel CtModel;

// One detection: score and volume `x1, y1, t1, x2, y2, t2` (pixels, frames).
typedef struct CtDetection {
  double score;
  double volume[6];
} CtDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or "" after a success.
// Valid until the next call on the same thread.
const char *ct_last_error(void);

// Load a binary codebook file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CtStatus ct_codebook_load(const char *path, struct CtCodebook **out);

// # Safety
// `cb` must come from [`ct_codebook_load`] and not be used afterwards. Null is ignored.
void ct_codebook_free(struct CtCodebook *cb);

// Number of codewords and descriptor dimension.
//
// # Safety
// `cb` must be a live handle; `k` and `dim` must be writable.
enum CtStatus ct_codebook_shape(const struct CtCodebook *cb, size_t *k, size_t *dim);

// Nearest codeword of one descriptor (lowest index on ties).
//
// # Safety
// `descriptor` must hold `len` floats; `out` must be writable.
enum CtStatus ct_codebook_nearest(const struct CtCodebook *cb,
                                  const float *descriptor,
                                  size_t len,
                                  size_t *out);

// 3D generalized distance transform of a `dims[0] x dims[1] x dims[2]`
// grid: `out[p] = max_q scores[q] - d . (dx, dy, dt, dx^2, dy^2, dt^2)` with
// `(dx, dy, dt) = q - p`. `weights` is `(lx, ly, lt, qx, qy, qt)`; every
// quadratic weight must be at least 0.01. `out_argmax` (optional, may be
// null) receives `(x, y, t)` of the maximizer for every cell.
//
// # Safety
// `scores` and `out_values` must hold `W*H*T` doubles, `out_argmax` (if not
// null) `3*W*H*T` sizes; `dims` 3 sizes, `weights` 6 doubles.
enum CtStatus ct_gdt3(const double *scores,
                      const size_t *dims,
                      const double *weights,
                      double *out_values,
                      size_t *out_argmax);

// 2D transform of every time slice of a `dims[0] x dims[1] x dims[2]` grid.
// `weights` is `(lx, ly, qx, qy)`; `out_argmax` receives `(x, y)` per cell.
//
// # Safety
// As [`ct_gdt3`], with `2*W*H*T` sizes for `out_argmax` and 4 weights.
enum CtStatus ct_gdt2(const double *scores,
                      const size_t *dims,
                      const double *weights,
                      double *out_values,
                      size_t *out_argmax);

// Intersection over union of two volumes `x1, y1, t1, x2, y2, t2`.
//
// # Safety
// `a` and `b` must hold 6 doubles; `out` must be writable.
enum CtStatus ct_volume_iou(const double *a, const double *b, double *out);

// Load a hierarchy JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CtStatus ct_hierarchy_load(const char *path, struct CtHierarchy **out);

// # Safety
// `h` must come from [`ct_hierarchy_load`] and not be used afterwards. Null is ignored.
void ct_hierarchy_free(struct CtHierarchy *h);

// Number of layers, layer 0 included.
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum CtStatus ct_hierarchy_depth(const struct CtHierarchy *h, size_t *out);

// Number of element types of `layer`.
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum CtStatus ct_hierarchy_inventory_size(const struct CtHierarchy *h, size_t layer, size_t *out);

// Load a LASTDPM model JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CtStatus ct_model_load(const char *path, struct CtModel **out);

// # Safety
// `m` must come from [`ct_model_load`] and not be used afterwards. Null is ignored.
void ct_model_free(struct CtModel *m);

// Calibrated detection threshold of the model.
//
// # Safety
// `m` must be a live handle; `out` must be writable.
enum CtStatus ct_model_threshold(const struct CtModel *m, double *out);

// Detect with `model` on one video given its element file (as written by
// `comptraj detect-elements`) and its trajectory file (for the video size).
// `threshold` overrides the model threshold unless it is NaN. On success
// `*out` owns `*count` detections, sorted by descending score; release them
// with [`ct_detections_free`].
//
// # Safety
// Handles must be live, paths NUL-terminated, `out` and `count` writable.
enum CtStatus ct_model_detect(const struct CtModel *model,
                              const struct CtHierarchy *hierarchy,
                              const char *elements_path,
                              const char *trajectories_path,
                              double threshold,
                              struct CtDetection **out,
                              size_t *count);

// # Safety
// `dets` and `count` must come from one [`ct_model_detect`] call. Null is ignored.
void ct_detections_free(struct CtDetection *dets, size_t count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPTRAJ_H */
