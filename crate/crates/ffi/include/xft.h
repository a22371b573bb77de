#ifndef XFT_H
#define XFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum XftMergeMethod {
  // Shared expert at rate `lambda`, normal experts uniform.
  XFT_MERGE_METHOD_XFT = 0,
  XFT_MERGE_METHOD_UNIFORM = 1,
  XFT_MERGE_METHOD_EXTRACT_SHARED = 2,
} XftMergeMethod;

typedef enum XftStatus {
  XFT_STATUS_OK = 0,
  XFT_STATUS_NULL_POINTER = 1,
  XFT_STATUS_INVALID_ARGUMENT = 2,
  XFT_STATUS_IO = 3,
  XFT_STATUS_CHECKPOINT = 4,
  XFT_STATUS_SHAPE = 5,
  XFT_STATUS_CONTRACT = 6,
  XFT_STATUS_NUMERIC = 7,
  XFT_STATUS_CONFIG = 8,
  XFT_STATUS_DATASET = 9,
  XFT_STATUS_VERIFICATION = 10,
  XFT_STATUS_BUFFER_TOO_SMALL = 11,
  XFT_STATUS_PANIC = 12,
} XftStatus;

// Opaque model handle.
typedef struct XftModel XftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *xft_last_error(void);

// Randomly initialized dense model with the byte-level vocabulary.
//
// # Safety
// `out` must be valid for writing one pointer.
enum XftStatus xft_model_init_dense(size_t d_model,
                                    size_t n_layers,
                                    size_t n_heads,
                                    size_t d_ff,
                                    size_t max_seq_len,
                                    uint64_t seed,
                                    struct XftModel **out);

// # Safety
// `path` must be a NUL-terminated string; `out` valid for writing.
enum XftStatus xft_model_load(const char *path, struct XftModel **out);

// # Safety
// `model` must come from this library; `path` and `phase` NUL-terminated.
enum XftStatus xft_model_save(const struct XftModel *model,
                              const char *path,
                              const char *phase,
                              uint64_t seed);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void xft_model_free(struct XftModel *model);

// 1 for a mixture-of-experts model, 0 for dense, -1 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
int32_t xft_model_is_moe(const struct XftModel *model);

// # Safety
// `model` must come from this library; `out` valid for writing.
enum XftStatus xft_model_param_count(const struct XftModel *model, uint64_t *out);

// # Safety
// `model` must come from this library; `out` valid for writing.
enum XftStatus xft_model_vocab_size(const struct XftModel *model, size_t *out);

// Writes row-major logits `[len × vocab]` into `out`, which must hold at
// least `out_len` floats.
//
// # Safety
// `tokens` must point to `len` ids and `out` to `out_len` floats.
enum XftStatus xft_model_logits(const struct XftModel *model,
                                const uint32_t *tokens,
                                size_t len,
                                float *out,
                                size_t out_len);

// Masked next-token cross-entropy of one sequence.
//
// # Safety
// `tokens` and `mask` must each point to `len` elements; `out` valid for writing.
enum XftStatus xft_model_loss(const struct XftModel *model,
                              const uint32_t *tokens,
                              const uint8_t *mask,
                              size_t len,
                              double *out);

// New MoE model with every FFN copied into `experts` experts.
//
// # Safety
// `model` must come from this library; `out` valid for writing.
enum XftStatus xft_model_upcycle(const struct XftModel *model,
                                 size_t experts,
                                 size_t top_k,
                                 bool normalization,
                                 uint64_t seed,
                                 struct XftModel **out);

// New dense model merged from an MoE model. `lambda` is used by
// `XFT_MERGE_METHOD_XFT` only.
//
// # Safety
// `model` must come from this library; `out` valid for writing.
enum XftStatus xft_model_merge(const struct XftModel *model,
                               enum XftMergeMethod method,
                               double lambda,
                               struct XftModel **out);

// Greedy continuation of an instruction, written NUL-terminated into
// `buf`. `written` receives the text length without the terminator.
//
// # Safety
// `prompt` must be NUL-terminated, `buf` hold `buf_len` bytes, and
// `written` be valid for writing.
enum XftStatus xft_model_generate(const struct XftModel *model,
                                  const char *prompt,
                                  size_t max_new,
                                  char *buf,
                                  size_t buf_len,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XFT_H */
