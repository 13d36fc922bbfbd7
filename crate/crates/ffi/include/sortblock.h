#ifndef SORTBLOCK_H
#define SORTBLOCK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_INVALID_ARGUMENT = 2,
  SB_STATUS_SHAPE = 3,
  SB_STATUS_IO = 4,
  SB_STATUS_PARSE = 5,
  SB_STATUS_RUNTIME = 6,
  SB_STATUS_PANIC = 7,
} SbStatus;

/**
 * A final latent together with the seed and config hash that produced it.
 */
typedef struct SbLatent SbLatent;

/**
 * A network, its noise schedule and step list.
 */
typedef struct SbSampler SbSampler;

/**
 * Toy network and sampler settings.
 */
typedef struct SbModelParams {
  uint32_t num_blocks;
  uint32_t num_tokens;
  uint32_t channels;
  uint32_t mlp_ratio;
  uint64_t seed;
  double time_scale;
  /**
   * Number of DDIM steps over a 1000-step linear schedule.
   */
  uint32_t steps;
} SbModelParams;

/**
 * Engine settings. When `window_high` and `window_low` are both zero the
 * window is the middle `window_fraction` of the step list.
 */
typedef struct SbSortblockParams {
  uint32_t refresh_interval;
  double rho;
  uint32_t window_high;
  uint32_t window_low;
  double window_fraction;
  /**
   * 0 = linear prediction, 1 = direct copy.
   */
  uint32_t predict;
} SbSortblockParams;

typedef struct SbRunStats {
  uint64_t block_evals;
  uint64_t baseline_evals;
  uint64_t ranked_steps;
} SbRunStats;

typedef struct SbCompareReport {
  double psnr_db;
  double ssim;
  double relative_l2;
} SbCompareReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *sb_last_error_message(void);

struct SbModelParams sb_model_params_default(void);

struct SbSortblockParams sb_sortblock_params_default(void);

/**
 * # Safety
 * `params` must point to a valid `SbModelParams`; `out` must be writable.
 */
enum SbStatus sb_sampler_new(const struct SbModelParams *params, struct SbSampler **out);

/**
 * # Safety
 * `sampler` must be null or a handle from [`sb_sampler_new`] not yet freed.
 */
void sb_sampler_free(struct SbSampler *sampler);

/**
 * Full-compute DDIM sampling from the noise drawn for `seed`.
 *
 * # Safety
 * `sampler` must be a live handle; `out` must be writable; `stats` may be
 * null.
 */
enum SbStatus sb_sampler_run_baseline(const struct SbSampler *sampler,
                                      uint64_t seed,
                                      struct SbLatent **out,
                                      struct SbRunStats *stats);

/**
 * Sampling with the caching engine installed.
 *
 * # Safety
 * `sampler` and `params` must be valid; `out` must be writable; `stats`
 * may be null.
 */
enum SbStatus sb_sampler_run_sortblock(const struct SbSampler *sampler,
                                       uint64_t seed,
                                       const struct SbSortblockParams *params,
                                       struct SbLatent **out,
                                       struct SbRunStats *stats);

/**
 * # Safety
 * `latent` must be null or a live latent handle.
 */
void sb_latent_free(struct SbLatent *latent);

/**
 * # Safety
 * `latent` must be live; `rows` and `cols` must be writable.
 */
enum SbStatus sb_latent_shape(const struct SbLatent *latent, size_t *rows, size_t *cols);

/**
 * Copies the row-major values into `dst`, which holds `len` floats.
 *
 * # Safety
 * `dst` must be valid for `len` writes.
 */
enum SbStatus sb_latent_copy(const struct SbLatent *latent, float *dst, size_t len);

/**
 * Writes the latent in the blob format the command-line tool uses.
 *
 * # Safety
 * `latent` must be live; `path` must be a nul-terminated UTF-8 string.
 */
enum SbStatus sb_latent_write(const struct SbLatent *latent, const char *path);

/**
 * # Safety
 * `path` must be a nul-terminated UTF-8 string; `out` must be writable.
 */
enum SbStatus sb_latent_read(const char *path, struct SbLatent **out);

/**
 * Scores `candidate` against `reference`.
 *
 * # Safety
 * Both latents must be live; `report` must be writable.
 */
enum SbStatus sb_compare(const struct SbLatent *candidate,
                         const struct SbLatent *reference,
                         struct SbCompareReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SORTBLOCK_H */
