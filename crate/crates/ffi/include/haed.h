#ifndef HAED_H
#define HAED_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HaedStatus {
  HAED_STATUS_OK = 0,
  HAED_STATUS_NULL_POINTER = 1,
  HAED_STATUS_INVALID_ARGUMENT = 2,
  HAED_STATUS_IO = 3,
  HAED_STATUS_FORMAT = 4,
  HAED_STATUS_RUNTIME = 5,
  HAED_STATUS_BUFFER_TOO_SMALL = 6,
  HAED_STATUS_PANIC = 7,
} HaedStatus;

/**
 * A loaded checkpoint.
 */
typedef struct HaedModel HaedModel;

typedef struct HaedNgram HaedNgram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t haed_last_error(char *buf, size_t len);

/**
 * NUL-terminated crate version; static storage.
 */
const char *haed_version(void);

/**
 * Load a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a writable handle slot.
 */
enum HaedStatus haed_model_load(const char *dir, struct HaedModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`haed_model_load`] not yet freed.
 */
void haed_model_free(struct HaedModel *model);

/**
 * Input feature dimension and number of output classes (text plus eos).
 *
 * # Safety
 * `model` must be a live handle; the out pointers writable.
 */
enum HaedStatus haed_model_dims(const struct HaedModel *model,
                                size_t *feature_dim,
                                size_t *output_classes);

/**
 * Beam-search one utterance of `frames × dim` row-major features. With a
 * non-null `target_lm`, shallow fusion with `lm_weight` is applied. Writes at
 * most `capacity` token ids; `out_len` always receives the full length, and
 * `BufferTooSmall` is returned when it exceeds `capacity`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `target_lm` may be null.
 */
enum HaedStatus haed_model_decode(const struct HaedModel *model,
                                  const float *features,
                                  size_t frames,
                                  size_t dim,
                                  size_t beam,
                                  const struct HaedNgram *target_lm,
                                  double lm_weight,
                                  uint32_t *out_tokens,
                                  size_t capacity,
                                  size_t *out_len,
                                  double *out_score);

/**
 * Decode token ids to text through the checkpoint's tokenizer. Same buffer
 * contract as [`haed_last_error`]: returns the byte length needed.
 *
 * # Safety
 * `tokens` must hold `n` ids; `buf` null or `len` writable bytes.
 */
enum HaedStatus haed_model_detokenize(const struct HaedModel *model,
                                      const uint32_t *tokens,
                                      size_t n,
                                      char *buf,
                                      size_t len,
                                      size_t *out_needed);

/**
 * Decoder-LM log probability of a transcript, eos included.
 *
 * # Safety
 * `tokens` must hold `n` ids; `out` writable.
 */
enum HaedStatus haed_model_ilm_log_prob(const struct HaedModel *model,
                                        const uint32_t *tokens,
                                        size_t n,
                                        double *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a writable handle slot.
 */
enum HaedStatus haed_ngram_load(const char *path, struct HaedNgram **out);

/**
 * # Safety
 * `lm` must be null or a handle from [`haed_ngram_load`] not yet freed.
 */
void haed_ngram_free(struct HaedNgram *lm);

/**
 * `log p(token | prefix)`.
 *
 * # Safety
 * `prefix` must hold `n` ids; `out` writable.
 */
enum HaedStatus haed_ngram_log_prob(const struct HaedNgram *lm,
                                    const uint32_t *prefix,
                                    size_t n,
                                    uint32_t token,
                                    double *out);

/**
 * Word error rate of whitespace-separated strings with its edit counts.
 *
 * # Safety
 * `reference` and `hypothesis` must be NUL-terminated; out pointers writable.
 */
enum HaedStatus haed_wer(const char *reference,
                         const char *hypothesis,
                         double *out_wer,
                         size_t *out_sub,
                         size_t *out_ins,
                         size_t *out_del);

/**
 * CTC negative log-likelihood of `labels` under `frames × classes`
 * row-major log posteriors.
 *
 * # Safety
 * `log_probs` must hold `frames * classes` values and `labels` `n` ids.
 */
enum HaedStatus haed_ctc_loss(const double *log_probs,
                              size_t frames,
                              size_t classes,
                              uint32_t blank,
                              const uint32_t *labels,
                              size_t n,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAED_H */
