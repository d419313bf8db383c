#ifndef EDGESGG_H
#define EDGESGG_H

/* Generated by cbindgen from the edgesgg-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum EsggStatus {
  // Success.
  ESGG_STATUS_OK = 0,
  // Invalid argument or configuration.
  ESGG_STATUS_INVALID_ARGUMENT = 1,
  // Malformed or inconsistent data.
  ESGG_STATUS_DATA = 2,
  // Non-finite values where finite math was required.
  ESGG_STATUS_NUMERICAL = 3,
  // A required pointer was null.
  ESGG_STATUS_NULL_POINTER = 4,
  // A string was not valid UTF-8.
  ESGG_STATUS_UTF8 = 5,
  // An internal panic was caught at the boundary.
  ESGG_STATUS_PANIC = 6,
} EsggStatus;

// A loaded model behind the ABI: parameters plus configuration.
typedef struct EsggModel EsggModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The
// pointer stays valid until the next failing call on the same thread;
// do not free it.
const char *esgg_last_error_message(void);

// Release a string returned through an out-parameter.
//
// # Safety
// `s` must be a pointer previously returned by this library (or null).
void esgg_string_free(char *s);

// Closed-form dual counts of a complete graph on `n_nodes` nodes:
// `n(n-1)/2` dual nodes and `[n(n-1)/2] * (n-2)` dual edges.
//
// # Safety
// The out-parameters must be valid writable pointers.
enum EsggStatus esgg_dual_counts(uint64_t n_nodes,
                                 uint64_t *dual_nodes_out,
                                 uint64_t *dual_edges_out);

// Weighted score on the 0-100 scale:
// `0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr`.
double esgg_score_wtd(double r50, double wmap_rel, double wmap_phr);

// Transform a scene JSON document (`{"nodes":[...],"edges":[...]}`; an
// empty edge list means the complete candidate graph) into its edge
// dual graph JSON. The result must be freed with [`esgg_string_free`].
//
// # Safety
// `scene_json` must be a valid nul-terminated string and `dual_json_out`
// a valid pointer.
enum EsggStatus esgg_transform_scene(const char *scene_json, char **dual_json_out);

// Load a checkpoint JSON document
// (`{"seed":..,"config":{..},"params":{..}}`) into an opaque model
// handle. Free it with [`esgg_model_free`].
//
// # Safety
// `checkpoint_json` must be a valid nul-terminated string and
// `model_out` a valid pointer.
enum EsggStatus esgg_model_load(const char *checkpoint_json, struct EsggModel **model_out);

// Release a model handle.
//
// # Safety
// `model` must come from [`esgg_model_load`] (or be null) and must not
// be used afterwards.
void esgg_model_free(struct EsggModel *model);

// Relation vocabulary size of a loaded model (including the background
// class), or 0 for a null handle.
//
// # Safety
// `model` must be a live handle from [`esgg_model_load`] or null.
uint64_t esgg_model_n_rel_classes(const struct EsggModel *model);

// Run the model on one annotated scene (a dataset-line JSON document
// with detection features) and return the ranked triplet predictions as
// JSON. Labels and confidences come from the model's own object head;
// ground-truth triplets in the document are ignored. The result must be
// freed with [`esgg_string_free`].
//
// # Safety
// `model` must be a live handle, `scene_json` a valid nul-terminated
// string, and `predictions_out` a valid pointer.
enum EsggStatus esgg_model_predict(const struct EsggModel *model,
                                   const char *scene_json,
                                   char **predictions_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* EDGESGG_H */
