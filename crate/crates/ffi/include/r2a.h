#ifndef R2A_H
#define R2A_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum R2aStatus {
  R2A_STATUS_OK = 0,
  R2A_STATUS_NULL_POINTER = 1,
  R2A_STATUS_INVALID_ARGUMENT = 2,
  R2A_STATUS_IO = 3,
  R2A_STATUS_FORMAT = 4,
  R2A_STATUS_SHAPE = 5,
  R2A_STATUS_CONFIG = 6,
  R2A_STATUS_METRIC = 7,
  R2A_STATUS_PANIC = 8,
} R2aStatus;

typedef struct R2aArchive R2aArchive;

typedef struct R2aBank R2aBank;

typedef struct R2aScorer R2aScorer;

typedef struct R2aArchiveInfo {
  size_t dim;
  size_t num_layers;
  size_t grid_h;
  size_t grid_w;
  size_t image_h;
  size_t image_w;
} R2aArchiveInfo;

/**
 * Image-level branch scores and the fused score.
 */
typedef struct R2aScores {
  double s_text;
  double s_vis;
  double s_res;
  double s;
} R2aScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *r2a_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *r2a_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum R2aStatus r2a_archive_read(const char *path, struct R2aArchive **out);

/**
 * Parses an archive from `len` bytes at `data`.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be writable.
 */
enum R2aStatus r2a_archive_from_bytes(const uint8_t *data, size_t len, struct R2aArchive **out);

/**
 * # Safety
 * `archive` must come from this library and `path` must be NUL-terminated.
 */
enum R2aStatus r2a_archive_write(const struct R2aArchive *archive, const char *path);

/**
 * # Safety
 * `archive` must come from this library and `out` must be writable.
 */
enum R2aStatus r2a_archive_info(const struct R2aArchive *archive, struct R2aArchiveInfo *out);

/**
 * # Safety
 * `archive` must be NULL or a handle from this library not yet freed.
 */
void r2a_archive_free(struct R2aArchive *archive);

/**
 * Builds a scorer from a text-anchor file. A NULL `checkpoint` selects
 * identity mode; otherwise the checkpoint's adapters are loaded. `layer_ids`
 * lists the tapped layers of the archives that will be scored.
 *
 * # Safety
 * Strings must be NUL-terminated, `layer_ids` must hold `num_layers` values
 * and `out` must be writable.
 */
enum R2aStatus r2a_scorer_new(const char *anchors_path,
                              const char *checkpoint_path,
                              const uint32_t *layer_ids,
                              size_t num_layers,
                              struct R2aScorer **out);

/**
 * # Safety
 * `scorer` must be NULL or a handle from this library not yet freed.
 */
void r2a_scorer_free(struct R2aScorer *scorer);

/**
 * Memory bank over `count` normal reference archives.
 *
 * # Safety
 * `references` must hold `count` valid archive handles and `out` must be
 * writable.
 */
enum R2aStatus r2a_bank_new(const struct R2aScorer *scorer,
                            const struct R2aArchive *const *references,
                            size_t count,
                            struct R2aBank **out);

/**
 * # Safety
 * `bank` must be NULL or a handle from this library not yet freed.
 */
void r2a_bank_free(struct R2aBank *bank);

/**
 * Scores `query` against `bank`. When `map` is not NULL it receives the
 * fused `image_h × image_w` anomaly map, row-major; `map_len` must match.
 *
 * # Safety
 * Handles must come from this library, `scores` must be writable and `map`
 * must be NULL or hold `map_len` writable floats.
 */
enum R2aStatus r2a_score(const struct R2aScorer *scorer,
                         const struct R2aBank *bank,
                         const struct R2aArchive *query,
                         struct R2aScores *scores,
                         float *map,
                         size_t map_len);

/**
 * Trains adapters on the manifest's training split and writes the
 * checkpoint. `anchors_path` may be NULL to use the manifest's anchors;
 * `epochs` of 0 keeps the default.
 *
 * # Safety
 * Strings must be NUL-terminated (or NULL where allowed).
 */
enum R2aStatus r2a_train(const char *manifest_path,
                         const char *anchors_path,
                         const char *checkpoint_path,
                         uint64_t seed,
                         size_t epochs);

/**
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be writable.
 */
enum R2aStatus r2a_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be writable.
 */
enum R2aStatus r2a_average_precision(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

/**
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be writable.
 */
enum R2aStatus r2a_f1_max(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Runs the built-in identity and oracle checks; `passed` receives 1 when
 * all of them pass.
 *
 * # Safety
 * `passed` must be writable.
 */
enum R2aStatus r2a_verify(uint64_t seed, int32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* R2A_H */
