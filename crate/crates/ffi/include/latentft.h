#ifndef LATENTFT_H
#define LATENTFT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum LftStatus {
  LFT_OK = 0,
  LFT_ERR_NULL_POINTER = 1,
  LFT_ERR_INVALID_ARGUMENT = 2,
  LFT_ERR_DIMENSION = 3,
  LFT_ERR_DOMAIN = 4,
  LFT_ERR_NUMERIC = 5,
  LFT_ERR_DIVERGENCE = 6,
  LFT_ERR_IO = 7,
  LFT_ERR_FORMAT = 8,
  LFT_ERR_CONFIG = 9,
  LFT_ERR_INTERNAL = 10,
} LftStatus;

/**
 * Opaque model handle.
 */
typedef struct LftModel LftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t lft_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LftStatus lft_model_load(const char *path, struct LftModel **out);

/**
 * Releases a handle from [`lft_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`lft_model_load`] and not be freed twice.
 */
void lft_model_free(struct LftModel *model);

/**
 * Clip channels, latent channels and frame rate of a model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LftStatus lft_model_info(const struct LftModel *model,
                              size_t *channels,
                              size_t *latent_channels,
                              double *frame_rate_hz);

/**
 * Number of spectrum bins for `frames` latent frames padded `pad` times.
 *
 * # Safety
 * `out` must be writable.
 */
enum LftStatus lft_spectrum_n_bins(size_t frames, size_t pad, double frame_rate_hz, size_t *out);

/**
 * Sets `keep[k] = 1` for every bin whose frequency lies in `[lo_hz, hi_hz]`
 * and 0 elsewhere.
 *
 * # Safety
 * `keep` must point to `n_bins` writable bytes.
 */
enum LftStatus lft_band_to_mask(size_t frames,
                                size_t pad,
                                double frame_rate_hz,
                                double lo_hz,
                                double hi_hz,
                                uint8_t *keep,
                                size_t n_bins);

/**
 * Half-spectrum of a `channels x frames` latent. Writes `channels *
 * n_bins` real and imaginary parts, channel-major.
 *
 * # Safety
 * `latent` must hold `channels * frames` values; `re` and `im` must hold
 * `channels * n_bins`.
 */
enum LftStatus lft_analyze(const double *latent,
                           size_t channels,
                           size_t frames,
                           size_t pad,
                           double frame_rate_hz,
                           double *re,
                           double *im,
                           size_t n_bins);

/**
 * Generates one clip conditioned on the masked latent of `clip`.
 *
 * # Safety
 * `clip` and `out` must hold `channels * frames` values, `keep` `n_bins`.
 */
enum LftStatus lft_generate(const struct LftModel *model,
                            const double *clip_in,
                            size_t channels,
                            size_t frames,
                            const uint8_t *keep,
                            size_t n_bins,
                            size_t steps,
                            uint64_t seed,
                            double *out);

/**
 * Blends two references, each under its own mask.
 *
 * # Safety
 * `clip_a`, `clip_b` and `out` must hold `channels * frames` values;
 * `keep_a` and `keep_b` `n_bins` bytes.
 */
enum LftStatus lft_blend(const struct LftModel *model,
                         const double *clip_a,
                         const double *clip_b,
                         size_t channels,
                         size_t frames,
                         const uint8_t *keep_a,
                         const uint8_t *keep_b,
                         size_t n_bins,
                         double alpha,
                         double beta,
                         size_t steps,
                         uint64_t seed,
                         double *out);

/**
 * Emphasizes the band `keep` of `clip`: weight `alpha` on the full latent
 * and `beta` on the band-limited one.
 *
 * # Safety
 * `clip` and `out` must hold `channels * frames` values, `keep` `n_bins`.
 */
enum LftStatus lft_isolate(const struct LftModel *model,
                           const double *clip_in,
                           size_t channels,
                           size_t frames,
                           const uint8_t *keep,
                           size_t n_bins,
                           double alpha,
                           double beta,
                           size_t steps,
                           uint64_t seed,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTFT_H */
