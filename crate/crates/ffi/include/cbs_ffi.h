/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef CBS_FFI_H
#define CBS_FFI_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum CbsStatus {
  CBS_STATUS_OK = 0,
  CBS_STATUS_NULL_POINTER = 1,
  CBS_STATUS_INVALID_UTF8 = 2,
  CBS_STATUS_INVALID_ARGUMENT = 3,
  CBS_STATUS_TOKENIZATION = 4,
  CBS_STATUS_MODEL = 5,
  CBS_STATUS_VOCAB_MISMATCH = 6,
  CBS_STATUS_BUDGET = 7,
  CBS_STATUS_REMOTE = 8,
  CBS_STATUS_IO = 9,
  CBS_STATUS_PARSE = 10,
  CBS_STATUS_PANIC = 11,
} CbsStatus;

// A tuned/untuned model pair scoring responses by their log-probability ratio.
typedef struct CbsGuidance CbsGuidance;

// A tabular n-gram language model.
typedef struct CbsModel CbsModel;

// Output of a search or sampling call.
typedef struct CbsResult CbsResult;

// Search and sampling settings. `chunk_length = 0` means unbounded chunks and
// `top_k = 0` keeps every token.
typedef struct CbsSearchParams {
  size_t beam_width;
  size_t successors;
  size_t chunk_length;
  size_t max_tokens;
  double temperature;
  size_t top_k;
  double top_p;
  uint64_t seed;
  // Expand every token of the filtered support instead of sampling.
  bool exhaustive;
} CbsSearchParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *cbs_last_error_message(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void cbs_string_free(char *s);

// Library version, statically allocated.
const char *cbs_version(void);

// Parses a model from fixture text.
//
// # Safety
// `text` must be a valid C string and `out` a valid pointer.
enum CbsStatus cbs_model_parse(const char *text, struct CbsModel **out);

// Loads a model from a fixture file.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum CbsStatus cbs_model_load(const char *path, struct CbsModel **out);

// Builds a bundled model: `w2s-ref`, `w2s-tuned`, `w2s-base` or `uniform27`.
//
// # Safety
// `name` must be a valid C string and `out` a valid pointer.
enum CbsStatus cbs_model_builtin(const char *name, struct CbsModel **out);

// Vocabulary size including EOS; 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t cbs_model_vocab_size(const struct CbsModel *model);

// Serializes the model back to fixture text.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum CbsStatus cbs_model_to_fixture(const struct CbsModel *model, char **out);

// # Safety
// `model` must be NULL or a handle not yet freed.
void cbs_model_free(struct CbsModel *model);

// Pairs two models over the same vocabulary. Both are copied; the caller
// keeps ownership of its handles.
//
// # Safety
// `tuned` and `untuned` must be live handles and `out` a valid pointer.
enum CbsStatus cbs_guidance_new(const struct CbsModel *tuned,
                                const struct CbsModel *untuned,
                                struct CbsGuidance **out);

// Guidance score of `response` after `prompt`, both as text under the pair's
// vocabulary.
//
// # Safety
// `guidance` must be a live handle, strings valid, `out` a valid pointer.
enum CbsStatus cbs_guidance_score(const struct CbsGuidance *guidance,
                                  const char *prompt,
                                  const char *response,
                                  double *out);

// # Safety
// `guidance` must be NULL or a handle not yet freed.
void cbs_guidance_free(struct CbsGuidance *guidance);

// W = 4, K = 4, L = 5, 64 tokens, T = 0.7, top-k 50, top-p 1, seed 0.
struct CbsSearchParams cbs_search_params_default(void);

// Chunk-level beam search from `prompt` (text under the base vocabulary).
//
// # Safety
// Handles must be live, `prompt` a valid C string, `params` and `out` valid pointers.
enum CbsStatus cbs_search(const struct CbsModel *base,
                          const struct CbsGuidance *guidance,
                          const char *prompt,
                          const struct CbsSearchParams *params,
                          struct CbsResult **out);

// Best-of-N: `n` full samples, keep the highest guidance score. Uses the
// sampling fields and `max_tokens` of `params`.
//
// # Safety
// As for [`cbs_search`].
enum CbsStatus cbs_best_of_n(const struct CbsModel *base,
                             const struct CbsGuidance *guidance,
                             const char *prompt,
                             size_t n,
                             const struct CbsSearchParams *params,
                             struct CbsResult **out);

// One plain sample from the base model. The result's score is 0.
//
// # Safety
// As for [`cbs_search`].
enum CbsStatus cbs_sample(const struct CbsModel *base,
                          const char *prompt,
                          const struct CbsSearchParams *params,
                          struct CbsResult **out);

// Response text, borrowed from the result. NULL for a NULL handle.
//
// # Safety
// `result` must be NULL or a live handle.
const char *cbs_result_text(const struct CbsResult *result);

// Copies up to `cap` token ids into `buf` and returns the full token count.
//
// # Safety
// `result` must be NULL or a live handle; `buf` must hold `cap` entries
// (it may be NULL when `cap` is 0).
size_t cbs_result_tokens(const struct CbsResult *result, uint32_t *buf, size_t cap);

// Guidance score of the returned response; NaN for a NULL handle.
//
// # Safety
// `result` must be NULL or a live handle.
double cbs_result_score(const struct CbsResult *result);

// Whether the response ended with EOS or reached `max_tokens`.
//
// # Safety
// `result` must be NULL or a live handle.
bool cbs_result_complete(const struct CbsResult *result);

// Base-model tokens sampled to produce the result.
//
// # Safety
// `result` must be NULL or a live handle.
size_t cbs_result_sampled_tokens(const struct CbsResult *result);

// Search rounds run (1 for best-of-N and plain sampling).
//
// # Safety
// `result` must be NULL or a live handle.
size_t cbs_result_rounds(const struct CbsResult *result);

// The best hypothesis as JSON; free with [`cbs_string_free`].
//
// # Safety
// `result` must be a live handle and `out` a valid pointer.
enum CbsStatus cbs_result_to_json(const struct CbsResult *result, char **out);

// # Safety
// `result` must be NULL or a handle not yet freed.
void cbs_result_free(struct CbsResult *result);

// Runs the bundled invariant checks. Writes whether all passed and, when
// `report` is non-NULL, the JSON report (free with [`cbs_string_free`]).
//
// # Safety
// `all_passed` must be a valid pointer; `report` NULL or valid.
enum CbsStatus cbs_verify(uint64_t seed, bool *all_passed, char **report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBS_FFI_H */
