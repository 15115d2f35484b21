#ifndef GLIOMA_H
#define GLIOMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum GliomaStatus {
  GLIOMA_STATUS_OK = 0,
  GLIOMA_STATUS_NULL_POINTER = 1,
  GLIOMA_STATUS_INVALID_ARGUMENT = 2,
  GLIOMA_STATUS_SHAPE_MISMATCH = 3,
  GLIOMA_STATUS_IO = 4,
  GLIOMA_STATUS_MISSING_PATH = 5,
  GLIOMA_STATUS_BAD_MAGIC = 6,
  GLIOMA_STATUS_UNSUPPORTED_VERSION = 7,
  GLIOMA_STATUS_TRUNCATED = 8,
  GLIOMA_STATUS_CHECKSUM_MISMATCH = 9,
  GLIOMA_STATUS_FORMAT = 10,
  GLIOMA_STATUS_UNKNOWN_LABEL = 11,
  GLIOMA_STATUS_EMPTY_INPUT = 12,
  GLIOMA_STATUS_INVALID_CONFIG = 13,
  GLIOMA_STATUS_NON_FINITE = 14,
  GLIOMA_STATUS_OTHER = 15,
  GLIOMA_STATUS_PANIC = 16,
} GliomaStatus;

// Loaded network; opaque to C.
typedef struct GliomaModel GliomaModel;

// Class probabilities in (A, O, G, N) order. `label` is 0..=3.
typedef struct GliomaPrediction {
  double probs[4];
  int32_t label;
  double confidence;
} GliomaPrediction;

// Patient-level metrics; `confusion` is row-major, rows truth.
typedef struct GliomaEvalReport {
  uint64_t confusion[9];
  double f1_micro;
  double f1_macro;
  double kappa;
  double balanced_accuracy;
  uint64_t n_cases;
} GliomaEvalReport;

typedef struct GliomaQcVerdict {
  double bright_pixel_fraction;
  // 1 when the tile is background (class N).
  int32_t negative;
} GliomaQcVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// NUL-terminated library version; static storage.
const char *glioma_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next call on the same thread.
const char *glioma_last_error(void);

// Loads a checkpoint into a new handle stored in `*out`.
enum GliomaStatus glioma_model_load(const char *path, struct GliomaModel **out);

// Releases a handle; NULL is ignored.
void glioma_model_free(struct GliomaModel *model);

// Input side length and channel count the model expects.
enum GliomaStatus glioma_model_input_shape(const struct GliomaModel *model,
                                           size_t *size,
                                           size_t *channels);

// Predicts `n` images laid out N×C×S×S (row-major, values in [0, 1]) into
// `out[0..n]`.
enum GliomaStatus glioma_model_predict(const struct GliomaModel *model,
                                       const float *pixels,
                                       size_t n,
                                       struct GliomaPrediction *out);

// Slide-level vote over `n` tile probability rows (n×4).
enum GliomaStatus glioma_aggregate_tiles(const double *probs,
                                         size_t n,
                                         struct GliomaPrediction *out);

// Volume-level weighted mean over `n` slice probability rows (n×4).
enum GliomaStatus glioma_aggregate_slices(const double *probs,
                                          size_t n,
                                          struct GliomaPrediction *out);

// Weighted vote across `n` distinct modalities. Modality codes: 0 hist,
// 1 T1w, 2 T2w, 3 GdT1w, 4 FLAIR. `weights` may be NULL for equal weights.
enum GliomaStatus glioma_fuse(const int32_t *modalities,
                              const double *probs,
                              const double *weights,
                              size_t n,
                              struct GliomaPrediction *out);

// Metrics over `n` cases; labels are class codes 0 (A), 1 (O), 2 (G).
enum GliomaStatus glioma_evaluate(const int32_t *truth,
                                  const int32_t *pred,
                                  size_t n,
                                  struct GliomaEvalReport *out);

// Background check of a `width`×`height` interleaved RGB8 tile.
enum GliomaStatus glioma_qc_tile(const uint8_t *rgb,
                                 uint32_t width,
                                 uint32_t height,
                                 struct GliomaQcVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLIOMA_H */
