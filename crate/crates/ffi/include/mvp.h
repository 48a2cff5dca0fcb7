#ifndef MVP_H
#define MVP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MvpStatus {
  MVP_OK = 0,
  MVP_ERR_NULL = 1,
  MVP_ERR_INVALID_ARGUMENT = 2,
  MVP_ERR_SHAPE = 3,
  MVP_ERR_CONFIG = 4,
  MVP_ERR_IO = 5,
  MVP_ERR_FORMAT = 6,
  MVP_ERR_FINGERPRINT = 7,
  MVP_ERR_EMBODIMENT = 8,
  MVP_ERR_NON_FINITE = 9,
  MVP_ERR_BUFFER_TOO_SMALL = 10,
  MVP_ERR_PANIC = 11,
} MvpStatus;

typedef enum MvpCamera {
  MVP_CAMERA_WRIST = 0,
  MVP_CAMERA_THIRD = 1,
} MvpCamera;

// Opaque encoder handle.
typedef struct MvpEncoder MvpEncoder;

// Opaque policy handle, bound to its encoder.
typedef struct MvpPolicy MvpPolicy;

// Opaque simulator episode.
typedef struct MvpSim MvpSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message (NUL-terminated) into
// `buf` and returns its length without the terminator. Passing a null
// `buf` only reports the length.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t mvp_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *mvp_version(void);

// Parameter count of an encoder tier (`"vit-s"`, `"vit-b"`, ...).
//
// # Safety
// `tier` must be a NUL-terminated string; `out` must be writable.
enum MvpStatus mvp_count_params(const char *tier, uint64_t *out);

// Multiply-add count of one forward pass at `image_size`.
//
// # Safety
// `tier` must be a NUL-terminated string; `out` must be writable.
enum MvpStatus mvp_count_flops(const char *tier, size_t image_size, uint64_t *out);

// Loads an encoder checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MvpStatus mvp_encoder_load(const char *path, struct MvpEncoder **out);

// A randomly initialized encoder of `tier`.
//
// # Safety
// `tier` must be a NUL-terminated string; `out` must be writable.
enum MvpStatus mvp_encoder_random(const char *tier, uint64_t seed, struct MvpEncoder **out);

// # Safety
// `enc` must come from an `mvp_encoder_*` constructor and not be used afterwards.
void mvp_encoder_free(struct MvpEncoder *enc);

// Feature width and input image size of an encoder.
//
// # Safety
// `enc` must be a live handle; outputs must be writable or null.
enum MvpStatus mvp_encoder_dims(const struct MvpEncoder *enc, size_t *width, size_t *image_size);

// Hex fingerprint of the encoder parameters, NUL-terminated (65 bytes).
//
// # Safety
// `enc` must be a live handle; `buf` must hold `cap` bytes.
enum MvpStatus mvp_encoder_fingerprint(const struct MvpEncoder *enc, char *buf, size_t cap);

// Classification feature of an interleaved 8-bit RGB image of
// `width` x `height` pixels. Non-square or differently sized images are
// center-cropped and resized.
//
// # Safety
// `rgb` must hold `width * height * 3` bytes; `out` must hold `cap` floats;
// `written` may be null.
enum MvpStatus mvp_encoder_embed(const struct MvpEncoder *enc,
                                 const uint8_t *rgb,
                                 size_t width,
                                 size_t height,
                                 float *out,
                                 size_t cap,
                                 size_t *written);

// Loads a policy checkpoint and binds it to `enc`, which must be the
// encoder it was trained on unless the policy carries a finetuned one.
//
// # Safety
// `path` must be a NUL-terminated string, `enc` a live handle, `out` writable.
enum MvpStatus mvp_policy_load(const char *path,
                               const struct MvpEncoder *enc,
                               struct MvpPolicy **out);

// # Safety
// `policy` must come from [`mvp_policy_load`] and not be used afterwards.
void mvp_policy_free(struct MvpPolicy *policy);

// Simulator action (joint deltas, then the gripper command for the arm)
// for one observation.
//
// # Safety
// `rgb` must hold `width * height * 3` bytes, `proprio` `n_proprio` values,
// `out` `cap` values; `written` may be null.
enum MvpStatus mvp_policy_act(const struct MvpPolicy *policy,
                              const uint8_t *rgb,
                              size_t width,
                              size_t height,
                              const double *proprio,
                              size_t n_proprio,
                              double *out,
                              size_t cap,
                              size_t *written);

// New episode of `task`; `variation` < 0 draws a random one.
//
// # Safety
// `task` must be a NUL-terminated string; `out` must be writable.
enum MvpStatus mvp_sim_new(const char *task, int32_t variation, uint64_t seed, struct MvpSim **out);

// # Safety
// `sim` must come from [`mvp_sim_new`] and not be used afterwards.
void mvp_sim_free(struct MvpSim *sim);

// Advances one control step.
//
// # Safety
// `sim` must be a live handle; `action` must hold `n` values.
enum MvpStatus mvp_sim_step(struct MvpSim *sim, const double *action, size_t n);

// Whether the task's success predicate holds.
//
// # Safety
// `sim` must be a live handle; `out` must be writable.
enum MvpStatus mvp_sim_success(const struct MvpSim *sim, bool *out);

// Proprioceptive vector of the current state.
//
// # Safety
// `sim` must be a live handle; `out` must hold `cap` values.
enum MvpStatus mvp_sim_proprio(const struct MvpSim *sim, double *out, size_t cap, size_t *written);

// Noise-free scripted action for the current state.
//
// # Safety
// `sim` must be a live handle; `out` must hold `cap` values.
enum MvpStatus mvp_sim_expert_action(const struct MvpSim *sim,
                                     double *out,
                                     size_t cap,
                                     size_t *written);

// Renders a camera view as interleaved 8-bit RGB (64 x 64 x 3 bytes).
//
// # Safety
// `sim` must be a live handle; `out` must hold `cap` bytes.
enum MvpStatus mvp_sim_render(const struct MvpSim *sim,
                              enum MvpCamera camera,
                              uint8_t *out,
                              size_t cap,
                              size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVP_H */
