#ifndef SAVID_H
#define SAVID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Implemented corruption kinds, LiDAR first.
 */
typedef enum SavidCorruption {
  SAVID_CORRUPTION_DENSITY_DECREASE = 0,
  SAVID_CORRUPTION_CUTOUT = 1,
  SAVID_CORRUPTION_CROSSTALK = 2,
  SAVID_CORRUPTION_FOV_LOST = 3,
  SAVID_CORRUPTION_GAUSSIAN_NOISE_L = 4,
  SAVID_CORRUPTION_UNIFORM_NOISE_L = 5,
  SAVID_CORRUPTION_IMPULSE_NOISE_L = 6,
  SAVID_CORRUPTION_GAUSSIAN_NOISE_I = 7,
  SAVID_CORRUPTION_UNIFORM_NOISE_I = 8,
  SAVID_CORRUPTION_IMPULSE_NOISE_I = 9,
} SavidCorruption;

/**
 * Feature map selector for [`savid_forward_features`]: image, LiDAR, fused
 * and keypoint-refined maps.
 */
typedef enum SavidFeature {
  SAVID_FEATURE_IMAGE = 0,
  SAVID_FEATURE_LIDAR = 1,
  SAVID_FEATURE_FUSED = 2,
  SAVID_FEATURE_REFINED = 3,
} SavidFeature;

/**
 * Result code of every fallible call.
 */
typedef enum SavidStatus {
  SAVID_STATUS_OK = 0,
  /**
   * Bad argument, malformed config or unknown key.
   */
  SAVID_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Non-finite intermediate values or another numerical failure.
   */
  SAVID_STATUS_NUMERICAL = 2,
  SAVID_STATUS_IO = 3,
  SAVID_STATUS_NULL_POINTER = 4,
  /**
   * Output buffer shorter than the length written to the `len` out-param.
   */
  SAVID_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  SAVID_STATUS_PANIC = 6,
} SavidStatus;

/**
 * Opaque pipeline configuration.
 */
typedef struct SavidConfig SavidConfig;

/**
 * Opaque forward-pass result.
 */
typedef struct SavidForward SavidForward;

/**
 * Opaque synthetic scene.
 */
typedef struct SavidScene SavidScene;

/**
 * Box with center, `(l, w, h)` size and yaw in `(-pi, pi]`.
 */
typedef struct SavidBox {
  double center[3];
  double size[3];
  double yaw;
  uint32_t class_id;
  double score;
} SavidBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *savid_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *savid_last_error(void);

/**
 * Default configuration. Never null.
 */
struct SavidConfig *savid_config_default(void);

/**
 * Parses and validates a TOML configuration; unset keys keep defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` writable.
 */
enum SavidStatus savid_config_from_toml(const char *toml, struct SavidConfig **out);

/**
 * Serializes the configuration as TOML including the trailing NUL; `len`
 * receives the required byte count.
 *
 * # Safety
 * `config` must be a live handle; `buf` must hold `cap` bytes.
 */
enum SavidStatus savid_config_to_toml(const struct SavidConfig *config,
                                      char *buf,
                                      size_t cap,
                                      size_t *len);

/**
 * Feature map height, width and channel count for this configuration.
 *
 * # Safety
 * `config` must be a live handle; `shape` must hold 3 elements.
 */
enum SavidStatus savid_config_shape(const struct SavidConfig *config, size_t *shape);

/**
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void savid_config_free(struct SavidConfig *config);

/**
 * Deterministic synthetic scene with `frames` frames.
 *
 * # Safety
 * `config` must be a live handle and `out` writable.
 */
enum SavidStatus savid_scene_generate(const struct SavidConfig *config,
                                      uint64_t seed,
                                      size_t frames,
                                      struct SavidScene **out);

/**
 * Number of frames, or 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t savid_scene_frame_count(const struct SavidScene *scene);

/**
 * Ground-truth boxes of one frame.
 *
 * # Safety
 * `scene` must be a live handle; `buf` must hold `cap` boxes.
 */
enum SavidStatus savid_scene_boxes(const struct SavidScene *scene,
                                   size_t frame,
                                   struct SavidBox *buf,
                                   size_t cap,
                                   size_t *len);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void savid_scene_free(struct SavidScene *scene);

/**
 * Runs the first `sequence_length` frames of the scene through the pipeline.
 *
 * # Safety
 * `config` and `scene` must be live handles and `out` writable.
 */
enum SavidStatus savid_forward(const struct SavidConfig *config,
                               const struct SavidScene *scene,
                               struct SavidForward **out);

/**
 * Number of processed frames, or 0 for a null handle.
 *
 * # Safety
 * `result` must be null or a live handle.
 */
size_t savid_forward_frame_count(const struct SavidForward *result);

/**
 * Copies one `[H, W, C]` feature map, row-major, of one frame. `feature` is
 * a [`SavidFeature`] value.
 *
 * # Safety
 * `result` must be a live handle; `buf` must hold `cap` doubles.
 */
enum SavidStatus savid_forward_features(const struct SavidForward *result,
                                        size_t frame,
                                        uint32_t feature,
                                        double *buf,
                                        size_t cap,
                                        size_t *len);

/**
 * # Safety
 * `result` must be null or a handle not yet freed.
 */
void savid_forward_free(struct SavidForward *result);

/**
 * Runs the full corruption sweep with the built-in proxy scorer and writes
 * `report.json` and `rce.csv` into `out_dir`.
 *
 * # Safety
 * `config` must be a live handle and `out_dir` a NUL-terminated path.
 */
enum SavidStatus savid_robustness(const struct SavidConfig *config, const char *out_dir);

/**
 * Bird's-eye IoU of two boxes.
 *
 * # Safety
 * `a` and `b` must point to boxes and `out` be writable.
 */
enum SavidStatus savid_bev_iou(const struct SavidBox *a, const struct SavidBox *b, double *out_iou);

/**
 * Greedy NMS; writes kept indices in selection order.
 *
 * # Safety
 * `boxes` must hold `n` boxes; `keep` must hold `cap` indices.
 */
enum SavidStatus savid_nms(const struct SavidBox *boxes,
                           size_t n,
                           double iou_threshold,
                           size_t *keep,
                           size_t cap,
                           size_t *len);

/**
 * Relative degradation `(ap_cln - x) / ap_cln`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SavidStatus savid_rce(double ap_cln, double x, double *out_rce);

/**
 * Mean corrupted AP. `ap` is `kinds x 5`, row-major by severity, for the
 * first `kinds` entries of [`SavidCorruption`] in declaration order.
 *
 * # Safety
 * `ap` must hold `kinds * 5` doubles and `out` be writable.
 */
enum SavidStatus savid_ap_corr(const double *ap, size_t kinds, double *out_ap);

/**
 * Applies a LiDAR corruption to `n` `(x, y, z, reflectance)` points. `kind`
 * is a [`SavidCorruption`] value; `len` receives the output point count.
 *
 * # Safety
 * `points` must hold `4 * n` doubles; `buf` must hold `4 * cap` doubles.
 */
enum SavidStatus savid_corrupt_lidar(const double *points,
                                     size_t n,
                                     uint32_t kind,
                                     uint8_t severity,
                                     uint64_t seed,
                                     double *buf,
                                     size_t cap,
                                     size_t *len);

/**
 * Applies an image corruption to an `[h, w, 3]` image in `[0, 1]`;
 * `out_image` receives the same number of values. `kind` is a
 * [`SavidCorruption`] value.
 *
 * # Safety
 * `image` and `out` must each hold `h * w * 3` doubles.
 */
enum SavidStatus savid_corrupt_image(const double *image,
                                     size_t h,
                                     size_t w,
                                     uint32_t kind,
                                     uint8_t severity,
                                     uint64_t seed,
                                     double *out_image);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAVID_H */
