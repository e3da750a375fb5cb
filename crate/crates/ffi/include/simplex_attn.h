#ifndef SIMPLEX_ATTN_H
#define SIMPLEX_ATTN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// `SaAttnParams::logit_form` values.
#define SA_LOGIT_TRILINEAR 0

#define SA_LOGIT_DET 1

// Status codes; `SA_OK` is zero.
typedef enum SaStatus {
  SA_OK = 0,
  SA_NULL_POINTER = 1,
  SA_INVALID_CONFIG = 2,
  SA_INPUT_DOMAIN = 3,
  SA_USAGE = 4,
  SA_DEGENERATE_FIT = 5,
  SA_ZERO_BASELINE = 6,
  SA_PANIC = 7,
  SA_INTERNAL = 8,
} SaStatus;

// Opaque attention configuration.
typedef struct SaAttention SaAttention;

// Plain-data attention parameters.
typedef struct SaAttnParams {
  size_t n;
  size_t d;
  size_t q_heads;
  size_t kv_heads;
  size_t w1;
  size_t w2;
  // `SA_LOGIT_TRILINEAR` or `SA_LOGIT_DET`
  uint32_t logit_form;
  // Logit scale; `0` selects `1/sqrt(d)`.
  double scale;
  double k2_bias;
  double v2_bias;
  // Query tile length, at least `w2`; `0` picks a default.
  size_t block_q;
  // Key tile length; `0` picks a default.
  size_t block_kv;
} SaAttnParams;

// Power-law fit `-ln L = alpha ln N + beta`; `r2` is NaN when undefined.
typedef struct SaScalingFit {
  double alpha;
  double beta;
  double r2;
  double residual;
} SaScalingFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length
// excluding the terminator, or 0 when there is none.
//
// # Safety
// `buf` must be null or valid for `len` writes.
size_t sa_last_error(char *buf, size_t len);

// Validates `params` and stores a new handle in `*out`.
//
// # Safety
// `params` must point to a valid `SaAttnParams`; `out` must be writable.
enum SaStatus sa_attention_new(const struct SaAttnParams *params, struct SaAttention **out);

// Releases a handle from [`sa_attention_new`]; null is a no-op.
//
// # Safety
// `h` must be null or a live handle, not used afterwards.
void sa_attention_free(struct SaAttention *h);

// Element counts of the query-side and key/value-side buffers for `batch`.
//
// # Safety
// `h` must be a live handle; the out-pointers must be writable.
enum SaStatus sa_attention_sizes(const struct SaAttention *h,
                                 size_t batch,
                                 size_t *q_len,
                                 size_t *kv_len,
                                 size_t *lse_len);

// Tiled forward pass in double precision. `lse` may be null.
//
// # Safety
// Input pointers must be valid for the lengths reported by
// [`sa_attention_sizes`]; `out` and (if non-null) `lse` for writes.
enum SaStatus sa_attention_forward(const struct SaAttention *h,
                                   size_t batch,
                                   const double *q,
                                   const double *k,
                                   const double *k2,
                                   const double *v,
                                   const double *v2,
                                   double *out,
                                   double *lse);

// Tiled forward pass in single precision (accumulation is in double).
//
// # Safety
// As [`sa_attention_forward`].
enum SaStatus sa_attention_forward_f32(const struct SaAttention *h,
                                       size_t batch,
                                       const float *q,
                                       const float *k,
                                       const float *k2,
                                       const float *v,
                                       const float *v2,
                                       float *out,
                                       double *lse);

// Dense reference forward pass (materializes every logit; small inputs only).
//
// # Safety
// As [`sa_attention_forward`].
enum SaStatus sa_attention_reference_forward(const struct SaAttention *h,
                                             size_t batch,
                                             const double *q,
                                             const double *k,
                                             const double *k2,
                                             const double *v,
                                             const double *v2,
                                             double *out,
                                             double *lse);

// Tiled backward pass: gradients of `<d_out, O>` with respect to all five
// inputs. `out` and `lse` must come from [`sa_attention_forward`] on the
// same inputs.
//
// # Safety
// Input pointers valid for reads, gradient pointers for writes, with the
// lengths reported by [`sa_attention_sizes`].
enum SaStatus sa_attention_backward(const struct SaAttention *h,
                                    size_t batch,
                                    const double *q,
                                    const double *k,
                                    const double *k2,
                                    const double *v,
                                    const double *v2,
                                    const double *out,
                                    const double *lse,
                                    const double *d_out,
                                    double *dq,
                                    double *dk,
                                    double *dk2,
                                    double *dv,
                                    double *dv2);

// Match3 decision bits from the attention construction (`bits[i]` is 0/1).
//
// # Safety
// `tokens` valid for `n` reads, `bits` for `n` writes.
enum SaStatus sa_match3(uint32_t modulus, const uint32_t *tokens, size_t n, uint8_t *bits);

// Brute-force Match3 bits.
//
// # Safety
// As [`sa_match3`].
enum SaStatus sa_match3_oracle(uint32_t modulus, const uint32_t *tokens, size_t n, uint8_t *bits);

// Context length at which windowed 2-simplicial and dense dot-product
// attention cost the same FLOPs: `3·w1·w2`.
//
// # Safety
// `out` must be writable.
enum SaStatus sa_breakeven(uint64_t w1, uint64_t w2, uint64_t *out);

// Model FLOPs `6·n·w1·w2`; `SA_INPUT_DOMAIN` if it does not fit in 64 bits.
//
// # Safety
// `out` must be writable.
enum SaStatus sa_flops_2s(uint64_t n, uint64_t w1, uint64_t w2, uint64_t *out);

// OLS fit of `-ln nll` on `ln params` over `len` points.
//
// # Safety
// `params` and `nll` valid for `len` reads; `out` writable.
enum SaStatus sa_fit_power_law(const double *params,
                               const double *nll,
                               size_t len,
                               struct SaScalingFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIMPLEX_ATTN_H */
