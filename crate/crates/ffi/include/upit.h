#ifndef UPIT_H
#define UPIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UpitStatus {
  UPIT_STATUS_OK = 0,
  UPIT_STATUS_NULL_POINTER = 1,
  UPIT_STATUS_INVALID_ARGUMENT = 2,
  UPIT_STATUS_SHAPE = 3,
  UPIT_STATUS_NON_FINITE = 4,
  UPIT_STATUS_IO = 5,
  UPIT_STATUS_CONFIG = 6,
  UPIT_STATUS_BUFFER_TOO_SMALL = 7,
  UPIT_STATUS_BAD_MAGIC = 10,
  UPIT_STATUS_VERSION_MISMATCH = 11,
  UPIT_STATUS_TRUNCATED = 12,
  UPIT_STATUS_SHAPE_OFFSET = 13,
  UPIT_STATUS_HEADER = 14,
  UPIT_STATUS_PANIC = 99,
} UpitStatus;

// A loaded dense or mixture model. Opaque to C.
typedef struct UpitModel UpitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *upit_last_error(void);

// Loads a dense or mixture checkpoint. On success `*out` owns a model that
// must be released with `upit_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum UpitStatus upit_model_load(const char *path, struct UpitModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from `upit_model_load` and not be used afterwards.
void upit_model_free(struct UpitModel *model);

// Vocabulary size and expert count (0 for dense models).
//
// # Safety
// `model` must be live; the out pointers must be valid.
enum UpitStatus upit_model_info(const struct UpitModel *model,
                                size_t *vocab_size,
                                size_t *n_experts);

// Writes `len × vocab_size` row-major logits for one sequence.
//
// # Safety
// `tokens` must hold `len` values and `logits` `logits_len` values.
enum UpitStatus upit_model_forward(const struct UpitModel *model,
                                   const uint32_t *tokens,
                                   size_t len,
                                   double *logits,
                                   size_t logits_len);

// Perplexity of one sequence (at least two tokens).
//
// # Safety
// `tokens` must hold `len` values; `out` must be valid.
enum UpitStatus upit_model_perplexity(const struct UpitModel *model,
                                      const uint32_t *tokens,
                                      size_t len,
                                      double *out);

// Drop-and-rescale: each coordinate is zeroed with probability `p`, the
// survivors are scaled by `1 / (1 − p)`. Deterministic in `seed`.
//
// # Safety
// `delta` and `out` must each hold `len` values. They may alias.
enum UpitStatus upit_dare(const double *delta, size_t len, double p, uint64_t seed, double *out);

// `n · Σ f_i · P_i`.
//
// # Safety
// `fractions` and `probs` must each hold `n` values; `out` must be valid.
enum UpitStatus upit_load_balance_loss(const double *fractions,
                                       const double *probs,
                                       size_t n,
                                       double *out);

// Greedy capacity-bounded assignment of `rows` samples to `n` experts from
// a row-major perplexity table. `assignment[i]` receives the expert of
// sample `i`, or -1 when it was dropped.
//
// # Safety
// `ppl` must hold `rows × n` values, `assignment` `rows` values, and
// `dropped` must be valid.
enum UpitStatus upit_assign_buckets(const double *ppl,
                                    size_t rows,
                                    size_t n,
                                    size_t capacity,
                                    int64_t *assignment,
                                    size_t *dropped);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UPIT_H */
