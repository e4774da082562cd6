#ifndef STTRACK_H
#define STTRACK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success; every failure is negative.
 */
typedef enum StStatus {
  ST_STATUS_OK = 0,
  ST_STATUS_NULL_POINTER = -1,
  ST_STATUS_INVALID_ARGUMENT = -2,
  ST_STATUS_DIMENSION = -3,
  ST_STATUS_NUMERIC = -4,
  ST_STATUS_VALIDATION = -5,
  ST_STATUS_CONFIG = -6,
  ST_STATUS_STATE = -7,
  ST_STATUS_DOMAIN = -8,
  ST_STATUS_FORMAT = -9,
  ST_STATUS_IO = -10,
  ST_STATUS_PANIC = -11,
} StStatus;

/**
 * Opaque tracker handle.
 */
typedef struct StTracker StTracker;

/**
 * One input frame. `aux` must be non-null exactly for the depth, thermal
 * and event modalities; `text` may be null.
 */
typedef struct StFrame {
  const double *rgb;
  const double *aux;
  size_t height;
  size_t width;
  /**
   * 0 rgb, 1 depth, 2 thermal, 3 event, 4 language.
   */
  uint32_t modality;
  const double *text;
  size_t text_len;
} StFrame;

/**
 * Result of one frame.
 */
typedef struct StStep {
  double bbox[4];
  double score;
  size_t token_count;
} StStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in
 * bytes, so a caller can size a buffer with a first call on `len = 0`.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t st_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *st_version(void);

/**
 * New tracker with freshly initialized weights. `config` holds config
 * text (`key = value` lines) or is null for the desk preset.
 *
 * # Safety
 * `config` must be null or a NUL-terminated string; `out` must be valid.
 */
enum StStatus st_tracker_new(const char *config, struct StTracker **out);

/**
 * New tracker from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum StStatus st_tracker_from_checkpoint(const char *path, struct StTracker **out);

/**
 * Releases a tracker. Null is a no-op.
 *
 * # Safety
 * `t` must be null or a handle from this library, not yet freed.
 */
void st_tracker_free(struct StTracker *t);

/**
 * Starts (or restarts) tracking from a frame and its target box.
 *
 * # Safety
 * `t`, `frame` and `bbox` must be valid; `out` may be null.
 */
enum StStatus st_tracker_init(struct StTracker *t,
                              const struct StFrame *frame,
                              const double *bbox,
                              struct StStep *out);

/**
 * Tracks one frame. Returns `State` before initialization.
 *
 * # Safety
 * `t`, `frame` and `out` must be valid.
 */
enum StStatus st_tracker_track(struct StTracker *t,
                               const struct StFrame *frame,
                               struct StStep *out);

/**
 * Norm over every fusion hidden state.
 *
 * # Safety
 * `t` and `out` must be valid.
 */
enum StStatus st_tracker_state_norm(const struct StTracker *t, double *out);

/**
 * Slope magnitude of 1-based head `h`.
 */
double st_alibi_slope(size_t h);

/**
 * Geometric bound on the attention mass beyond `k` frames for slope `beta < 0`.
 *
 * # Safety
 * `out` must be valid.
 */
enum StStatus st_tail_bound(double beta, size_t k, double *out);

/**
 * Effective horizon at tolerance `eta` for slope `beta < 0`.
 *
 * # Safety
 * `out` must be valid.
 */
enum StStatus st_horizon(double beta, double eta, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STTRACK_H */
