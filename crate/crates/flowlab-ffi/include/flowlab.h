#ifndef FLOWLAB_H
#define FLOWLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call.
 */
typedef enum FlStatus {
  /**
   * The call succeeded.
   */
  FlStatus_Ok = 0,
  /**
   * The inputs were rejected: bad flag value, missing file, shape or
   * conditioning mismatch. See `fl_last_error`.
   */
  FlStatus_InvalidInput = 1,
  /**
   * The computation itself failed (I/O, non-finite numbers, panic).
   */
  FlStatus_Runtime = 2,
  /**
   * A required pointer argument was NULL.
   */
  FlStatus_NullPointer = 3,
} FlStatus;

/**
 * A loaded checkpoint: the network plus the path and conditioning metadata
 * it was trained with.
 */
typedef struct FlCheckpoint FlCheckpoint;

/**
 * A batch of generated samples, stored row-major as `count` rows of `dim`
 * doubles.
 */
typedef struct FlSamples FlSamples;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static NUL-terminated string.
 */
const char *fl_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated to
 * `cap` bytes, always NUL-terminated when `cap > 0`) and returns the size
 * the full message needs, terminator included. Returns 0 when no error has
 * been recorded. `buf` may be NULL to query the size.
 */
uintptr_t fl_last_error(char *buf, uintptr_t cap);

/**
 * Loads a checkpoint file written by the `flowlab` trainer into a fresh
 * handle. On success `*out` owns the handle; release it with
 * [`fl_checkpoint_free`].
 */
enum FlStatus fl_checkpoint_load(const char *path, struct FlCheckpoint **out);

/**
 * Releases a checkpoint handle. NULL is ignored.
 */
void fl_checkpoint_free(struct FlCheckpoint *ckpt);

/**
 * Writes the number of axes of one data sample (1 for vector data, 3 for
 * channel-height-width images) to `*out_rank`.
 */
enum FlStatus fl_checkpoint_rank(const struct FlCheckpoint *ckpt, uintptr_t *out_rank);

/**
 * Copies the per-sample data shape into `out` (`cap` elements available).
 * Fails with `InvalidInput` when `cap` is too small; query the needed size
 * with [`fl_checkpoint_rank`].
 */
enum FlStatus fl_checkpoint_shape(const struct FlCheckpoint *ckpt, uintptr_t *out, uintptr_t cap);

/**
 * Writes the number of classes the checkpoint was trained to condition on,
 * or -1 when it is unconditional.
 */
enum FlStatus fl_checkpoint_num_classes(const struct FlCheckpoint *ckpt, int64_t *out);

/**
 * Draws `count` samples from a checkpoint.
 *
 * `family` picks the solver: "euler" or "heun" for flow checkpoints,
 * "ddpm_ancestral" or "ddim" for diffusion checkpoints. `class_index`
 * conditions every sample on that class; pass a negative value for
 * unconditional sampling. The same seed always reproduces the same batch.
 * On success `*out` owns the result; release it with [`fl_samples_free`].
 */
enum FlStatus fl_sample(const struct FlCheckpoint *ckpt,
                        const char *family,
                        uintptr_t steps,
                        uintptr_t count,
                        uint64_t seed,
                        int64_t class_index,
                        struct FlSamples **out);

/**
 * Number of samples in the batch; 0 for NULL.
 */
uintptr_t fl_samples_count(const struct FlSamples *samples);

/**
 * Elements per sample (the data shape, flattened); 0 for NULL.
 */
uintptr_t fl_samples_dim(const struct FlSamples *samples);

/**
 * Borrow of the sample buffer: `count * dim` doubles, row-major, valid
 * until the handle is freed. NULL for a NULL handle.
 */
const double *fl_samples_data(const struct FlSamples *samples);

/**
 * Releases a sample batch. NULL is ignored.
 */
void fl_samples_free(struct FlSamples *samples);

/**
 * Unbiased squared maximum mean discrepancy between two sample sets, with
 * the kernel bandwidth chosen by the median heuristic. `x` holds `n`
 * rows and `y` holds `m` rows of `dim` doubles each; both need at least
 * two rows. Identical sets score (numerically) zero.
 */
enum FlStatus fl_mmd2(const double *x,
                      uintptr_t n,
                      const double *y,
                      uintptr_t m,
                      uintptr_t dim,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWLAB_H */
