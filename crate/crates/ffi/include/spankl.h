#ifndef SPANKL_H
#define SPANKL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum SpanklStatus {
  SPANKL_STATUS_OK = 0,
  SPANKL_STATUS_NULL_POINTER = 1,
  SPANKL_STATUS_INVALID_UTF8 = 2,
  SPANKL_STATUS_INVALID_ARGUMENT = 3,
  SPANKL_STATUS_CONFIG = 4,
  SPANKL_STATUS_PARSE = 5,
  SPANKL_STATUS_DATA = 6,
  SPANKL_STATUS_IO = 7,
  SPANKL_STATUS_SHAPE = 8,
  SPANKL_STATUS_ABORTED = 9,
  SPANKL_STATUS_SERIALIZATION = 10,
  SPANKL_STATUS_PANIC = 11,
} SpanklStatus;

// Opaque handle to a trained model.
typedef struct SpanklModel SpanklModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; do not free.
const char *spankl_version(void);

// Copy of the calling thread's last error message, or null if the last call
// succeeded. Free with `spankl_string_free`.
char *spankl_last_error_message(void);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a pointer obtained from this library and not yet freed.
void spankl_string_free(char *s);

// Load a model saved by a training step (a `step_{l}` directory).
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must point to writable storage.
enum SpanklStatus spankl_model_load(const char *dir, struct SpanklModel **out);

// Release a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from `spankl_model_load` not yet freed.
void spankl_model_free(struct SpanklModel *model);

// Entity types the model has learned, as a JSON array of strings.
//
// # Safety
// `model` must be a live handle; `out` must point to writable storage.
enum SpanklStatus spankl_model_types(const struct SpanklModel *model, char **out);

// Predict spans for one whitespace-tokenized sentence. The result is a JSON
// array of `{"start","end","label","score"}` objects with inclusive token
// offsets.
//
// # Safety
// `model` must be a live handle; `sentence` a NUL-terminated string; `out`
// must point to writable storage.
enum SpanklStatus spankl_model_predict(const struct SpanklModel *model,
                                       const char *sentence,
                                       char **out);

// Build a benchmark directory from a corpus directory. `kind` is `toy`,
// `ontonotes`, or `fewnerd`; `setup` one of `split-all`, `split-filter`,
// `filter-all`, `filter-filter`. `tasks` and `orders` apply to the toy kind.
//
// # Safety
// All string arguments must be NUL-terminated.
enum SpanklStatus spankl_synthesize(const char *corpus_dir,
                                    const char *kind,
                                    const char *setup,
                                    uint64_t seed,
                                    uint32_t permutation,
                                    uint32_t tasks,
                                    uint32_t orders,
                                    const char *out_dir);

// Train over a benchmark directory. `config_path` may be null for defaults;
// `mode` is `cl` or `noncl`.
//
// # Safety
// String arguments must be NUL-terminated (`config_path` may be null).
enum SpanklStatus spankl_train(const char *benchmark_dir,
                               const char *config_path,
                               const char *mode,
                               const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPANKL_H */
