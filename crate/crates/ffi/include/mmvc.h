#ifndef MMVC_H
#define MMVC_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call. `Ok` is zero.
typedef enum MmvcStatus {
  MMVC_STATUS_OK = 0,
  MMVC_STATUS_NULL_POINTER = 1,
  MMVC_STATUS_UTF8 = 2,
  MMVC_STATUS_INVALID_ARGUMENT = 3,
  MMVC_STATUS_SHAPE_MISMATCH = 4,
  MMVC_STATUS_CONFIG = 5,
  MMVC_STATUS_UNREACHABLE_PAIR = 6,
  MMVC_STATUS_UNREACHABLE_TASK = 7,
  MMVC_STATUS_SPACE_MISMATCH = 8,
  MMVC_STATUS_OUT_OF_VOCABULARY = 9,
  MMVC_STATUS_NON_FINITE = 10,
  MMVC_STATUS_CORRUPT_FILE = 11,
  MMVC_STATUS_VERSION_MISMATCH = 12,
  MMVC_STATUS_IO = 13,
  MMVC_STATUS_BUFFER_TOO_SMALL = 14,
  MMVC_STATUS_INTERNAL = 15,
  MMVC_STATUS_PANIC = 16,
} MmvcStatus;

// Embedding space selector.
typedef enum MmvcSpace {
  MMVC_SPACE_VA = 0,
  MMVC_SPACE_VT = 1,
  MMVC_SPACE_VAT = 2,
} MmvcSpace;

// A resolved run configuration.
typedef struct MmvcConfig MmvcConfig;

// Model parameters together with the configuration that shaped them.
typedef struct MmvcModel MmvcModel;

// Input sizes a model expects.
typedef struct MmvcDims {
  size_t d_v;
  size_t d_a;
  size_t d_t;
  size_t frames;
  size_t crop;
  size_t audio_samples;
  size_t seq_len;
  size_t vocab_size;
} MmvcDims;

// Held-out gaps of a deflation.
typedef struct MmvcDeflateReport {
  double naive_gap;
  double gap;
  size_t epochs;
} MmvcDeflateReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *mmvc_last_error(void);

// Library version as a static NUL-terminated string.
const char *mmvc_version(void);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void mmvc_string_free(char *s);

// Resolve a configuration from an optional preset name, an optional TOML
// document and `n_overrides` `key=value` strings.
//
// # Safety
// Non-null strings must be NUL-terminated; `overrides` must hold `n_overrides` pointers.
enum MmvcStatus mmvc_config_new(const char *preset,
                                const char *toml,
                                const char *const *overrides,
                                size_t n_overrides,
                                struct MmvcConfig **out);

// The fully resolved configuration as TOML.
//
// # Safety
// `cfg` must be a live handle.
enum MmvcStatus mmvc_config_to_toml(const struct MmvcConfig *cfg, char **out);

// # Safety
// `cfg` must be null or a live handle; it is invalid afterwards.
void mmvc_config_free(struct MmvcConfig *cfg);

// Freshly initialised model for `cfg`.
//
// # Safety
// `cfg` must be a live handle.
enum MmvcStatus mmvc_model_new(const struct MmvcConfig *cfg, uint64_t seed, struct MmvcModel **out);

// Train with `cfg`. Checkpoints and metrics go to `out_dir` when it is not null.
//
// # Safety
// `cfg` must be a live handle; `out_dir` null or NUL-terminated.
enum MmvcStatus mmvc_train(const struct MmvcConfig *cfg,
                           const char *out_dir,
                           struct MmvcModel **out);

// Load the model stored in a checkpoint file.
//
// # Safety
// `path` must be NUL-terminated.
enum MmvcStatus mmvc_model_load(const char *path, struct MmvcModel **out);

// Write the model and its configuration to a checkpoint file.
//
// # Safety
// `model` must be a live handle; `path` NUL-terminated.
enum MmvcStatus mmvc_model_save(const struct MmvcModel *model, const char *path);

// # Safety
// `model` must be null or a live handle; it is invalid afterwards.
void mmvc_model_free(struct MmvcModel *model);

// Backbone widths and input sizes.
//
// # Safety
// `model` must be a live handle.
enum MmvcStatus mmvc_model_dims(const struct MmvcModel *model, struct MmvcDims *out);

// Width of `space`. Fails when the model's graph has no such space.
//
// # Safety
// `model` must be a live handle.
enum MmvcStatus mmvc_model_space_dim(const struct MmvcModel *model,
                                     enum MmvcSpace space,
                                     size_t *out);

// Embed one clip of `t` RGB frames, `h x w x 3` row-major floats in `[0, 1]`.
//
// # Safety
// `model` must be a live handle; `frames` must hold `t*h*w*3` floats and `out` `out_len`.
enum MmvcStatus mmvc_model_embed_video(const struct MmvcModel *model,
                                       const float *frames,
                                       size_t t,
                                       size_t h,
                                       size_t w,
                                       enum MmvcSpace space,
                                       float *out,
                                       size_t out_len);

// Embed one still image, `h x w x 3` row-major floats in `[0, 1]`.
// Meant for models returned by [`mmvc_model_deflate`].
//
// # Safety
// `model` must be a live handle; `pixels` must hold `h*w*3` floats and `out` `out_len`.
enum MmvcStatus mmvc_model_embed_image(const struct MmvcModel *model,
                                       const float *pixels,
                                       size_t h,
                                       size_t w,
                                       enum MmvcSpace space,
                                       float *out,
                                       size_t out_len);

// Embed one mono waveform at the model's sample rate.
//
// # Safety
// `model` must be a live handle; `samples` must hold `n` floats and `out` `out_len`.
enum MmvcStatus mmvc_model_embed_audio(const struct MmvcModel *model,
                                       const float *samples,
                                       size_t n,
                                       enum MmvcSpace space,
                                       float *out,
                                       size_t out_len);

// Embed one token sequence. Longer inputs are truncated, shorter ones padded.
//
// # Safety
// `model` must be a live handle; `ids` must hold `n` ids and `out` `out_len` floats.
enum MmvcStatus mmvc_model_embed_text(const struct MmvcModel *model,
                                      const uint32_t *ids,
                                      size_t n,
                                      enum MmvcSpace space,
                                      float *out,
                                      size_t out_len);

// Run an evaluation task (`probe-video`, `retrieval-t2v`, ...) and return its CSV report.
//
// # Safety
// `model` must be a live handle; `task` NUL-terminated.
enum MmvcStatus mmvc_eval(const struct MmvcModel *model, const char *task, char **out_csv);

// Turn the video network into an image network, calibrated on `n_images`
// synthetic frames. `recalibrated` selects the trained correction over plain
// temporal summation.
//
// # Safety
// `model` must be a live handle; `report` may be null.
enum MmvcStatus mmvc_model_deflate(const struct MmvcModel *model,
                                   bool recalibrated,
                                   size_t n_images,
                                   struct MmvcModel **out,
                                   struct MmvcDeflateReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMVC_H */
