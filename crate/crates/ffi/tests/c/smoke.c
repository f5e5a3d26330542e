#include <math.h>
#include <stdio.h>
#include <string.h>

#include "cbs_ffi.h"

#define CHECK(call)                                                              \
  do {                                                                           \
    CbsStatus s_ = (call);                                                       \
    if (s_ != CBS_STATUS_OK) {                                                   \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_, cbs_last_error_message()); \
      return 1;                                                                  \
    }                                                                            \
  } while (0)

int main(void) {
  CbsModel *base = NULL, *tuned = NULL, *ref = NULL;
  CHECK(cbs_model_builtin("w2s-base", &base));
  CHECK(cbs_model_builtin("w2s-tuned", &tuned));
  CHECK(cbs_model_builtin("w2s-ref", &ref));

  CbsGuidance *g = NULL;
  CHECK(cbs_guidance_new(tuned, ref, &g));

  CbsSearchParams p = cbs_search_params_default();
  p.max_tokens = 4;
  p.chunk_length = 2;
  p.temperature = 1.0;
  p.top_k = 0;
  p.seed = 7;

  CbsResult *r = NULL;
  CHECK(cbs_search(base, g, "a", &p, &r));
  const char *text = cbs_result_text(r);
  uint32_t toks[8];
  size_t n = cbs_result_tokens(r, toks, 8);
  double recomputed = 0.0;
  CHECK(cbs_guidance_score(g, "a", text, &recomputed));
  if (fabs(recomputed - cbs_result_score(r)) > 1e-9 || n == 0 || !cbs_result_complete(r)) {
    fprintf(stderr, "inconsistent result\n");
    return 1;
  }

  if (cbs_model_builtin("nope", &base) != CBS_STATUS_PARSE || cbs_last_error_message() == NULL) {
    fprintf(stderr, "expected a parse error\n");
    return 1;
  }

  printf("%s %.17g\n", text, cbs_result_score(r));
  cbs_result_free(r);
  cbs_guidance_free(g);
  cbs_model_free(base);
  cbs_model_free(tuned);
  cbs_model_free(ref);
  return 0;
}
