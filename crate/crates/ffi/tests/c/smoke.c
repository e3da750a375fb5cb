#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "simplex_attn.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      char msg[256];                                                  \
      sa_last_error(msg, sizeof msg);                                 \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, msg); \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  SaAttnParams p = {0};
  p.n = 12;
  p.d = 4;
  p.q_heads = 1;
  p.kv_heads = 1;
  p.w1 = 5;
  p.w2 = 3;
  p.logit_form = SA_LOGIT_TRILINEAR;

  SaAttention *h = NULL;
  CHECK(sa_attention_new(&p, &h) == SA_OK);
  size_t ql, kvl, ll;
  CHECK(sa_attention_sizes(h, 1, &ql, &kvl, &ll) == SA_OK);

  double *buf[5];
  for (int t = 0; t < 5; t++) {
    buf[t] = malloc(kvl * sizeof(double));
    for (size_t i = 0; i < kvl; i++) buf[t][i] = sin(0.37 * (double)(i + 1) * (t + 1));
  }
  double *out = malloc(ql * sizeof(double));
  double *ref = malloc(ql * sizeof(double));
  double *lse = malloc(ll * sizeof(double));
  CHECK(sa_attention_forward(h, 1, buf[0], buf[1], buf[2], buf[3], buf[4], out, lse) == SA_OK);
  CHECK(sa_attention_reference_forward(h, 1, buf[0], buf[1], buf[2], buf[3], buf[4], ref, NULL) == SA_OK);
  for (size_t i = 0; i < ql; i++) CHECK(fabs(out[i] - ref[i]) < 1e-12);

  CHECK(sa_attention_forward(h, 1, NULL, buf[1], buf[2], buf[3], buf[4], out, NULL) == SA_NULL_POINTER);
  sa_attention_free(h);

  uint64_t n = 0;
  CHECK(sa_breakeven(512, 32, &n) == SA_OK && n == 49152);

  for (int t = 0; t < 5; t++) free(buf[t]);
  free(out);
  free(ref);
  free(lse);
  printf("ok\n");
  return 0;
}
