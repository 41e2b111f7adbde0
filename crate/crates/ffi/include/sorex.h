#ifndef SOREX_H
#define SOREX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SorexStatus {
  SOREX_STATUS_OK = 0,
  SOREX_STATUS_NULL_POINTER = 1,
  SOREX_STATUS_INVALID_UTF8 = 2,
  SOREX_STATUS_IO = 3,
  SOREX_STATUS_PARSE = 4,
  SOREX_STATUS_FORMAT = 5,
  SOREX_STATUS_CONFIG = 6,
  SOREX_STATUS_DIGEST_MISMATCH = 7,
  SOREX_STATUS_OUT_OF_RANGE = 8,
  SOREX_STATUS_NON_FINITE = 9,
  SOREX_STATUS_INTERNAL = 10,
} SorexStatus;

/**
 * Prepared graph and split, read from a graph cache file.
 */
typedef struct SorexGraph SorexGraph;

/**
 * Trained model bound to its training graph.
 */
typedef struct SorexModel SorexModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sorex_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next call into the library on this thread.
 */
const char *sorex_last_error(void);

/**
 * Reads a graph cache written by `sorex prepare`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SorexStatus sorex_graph_load(const char *path, struct SorexGraph **out);

/**
 * Writes the user and item counts.
 *
 * # Safety
 * `graph` must come from [`sorex_graph_load`]; outputs must be writable.
 */
enum SorexStatus sorex_graph_counts(const struct SorexGraph *graph, size_t *users, size_t *items);

/**
 * # Safety
 * `graph` must come from [`sorex_graph_load`] or be NULL.
 */
void sorex_graph_free(struct SorexGraph *graph);

/**
 * Loads a checkpoint against the run configuration that produced it.
 * `config_path` may be NULL for defaults. The checkpoint digest must
 * match the configuration.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `graph` a live handle; `out`
 * writable.
 */
enum SorexStatus sorex_model_load(const char *config_path,
                                  const struct SorexGraph *graph,
                                  const char *checkpoint_path,
                                  struct SorexModel **out);

/**
 * Scores `count` items for `user` as the evaluator does: one walk pool
 * for the user and one explanation draw per item, from streams keyed by
 * the run seed.
 *
 * # Safety
 * `model` must be live; `items` and `scores` must hold `count` elements.
 */
enum SorexStatus sorex_model_score(const struct SorexModel *model,
                                   uint32_t user,
                                   const uint32_t *items,
                                   size_t count,
                                   double *scores);

/**
 * # Safety
 * `model` must come from [`sorex_model_load`] or be NULL.
 */
void sorex_model_free(struct SorexModel *model);

/**
 * NDCG@k of a single relevant item at 1-based `rank`.
 */
double sorex_ndcg_at(size_t rank, size_t k);

/**
 * 1 if 1-based `rank` is within `k`, else 0.
 */
double sorex_hit_at(size_t rank, size_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOREX_H */
