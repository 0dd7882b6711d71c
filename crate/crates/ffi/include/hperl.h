#ifndef HPERL_H
#define HPERL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HperlStatus {
  HPERL_STATUS_OK = 0,
  HPERL_STATUS_NULL_ARG = 1,
  HPERL_STATUS_INVALID_ARG = 2,
  HPERL_STATUS_BEHIND_CAMERA = 3,
  HPERL_STATUS_IO = 4,
  HPERL_STATUS_FORMAT = 5,
  HPERL_STATUS_CHECKSUM = 6,
  HPERL_STATUS_NUMERIC = 7,
  HPERL_STATUS_PANIC = 8,
} HperlStatus;

typedef struct HperlBev HperlBev;

typedef struct HperlModel HperlModel;

typedef struct HperlPoses HperlPoses;

typedef struct HperlScene HperlScene;

/**
 * Pinhole intrinsics, pixels.
 */
typedef struct HperlCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} HperlCamera;

/**
 * Axis-aligned region in camera coordinates, meters.
 */
typedef struct HperlExtents {
  double x_min;
  double x_max;
  double y_min;
  double y_max;
  double z_min;
  double z_max;
} HperlExtents;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t hperl_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hperl_version(void);

/**
 * Project a camera-frame point to pixels.
 *
 * # Safety
 * `point` must hold 3 doubles and `out_uv` 2.
 */
enum HperlStatus hperl_project_point(const struct HperlCamera *cam,
                                     const double *point,
                                     double *out_uv);

/**
 * RANSAC ground plane of `n` points given as x, y, z, intensity quadruples.
 * Writes the plane normal and a point on it.
 *
 * # Safety
 * `points` must hold `4 n` doubles; `out_normal` and `out_point` 3 each.
 */
enum HperlStatus hperl_fit_ground_plane(const double *points,
                                        size_t n,
                                        uint64_t seed,
                                        double offset,
                                        double *out_normal,
                                        double *out_point);

/**
 * Center depth error of a 13-joint pose (39 doubles) against a box.
 *
 * # Safety
 * `pose_3d` must hold 39 doubles, `center` and `size` 3 each.
 */
enum HperlStatus hperl_cde(const double *pose_3d,
                           const double *center,
                           const double *size,
                           double *out);

/**
 * Center error orthogonal to depth; arguments as [`hperl_cde`].
 *
 * # Safety
 * As [`hperl_cde`].
 */
enum HperlStatus hperl_xye(const double *pose_3d,
                           const double *center,
                           const double *size,
                           double *out);

/**
 * Generate one synthetic scene with the default scene settings.
 *
 * # Safety
 * `out` must be valid for writing a handle.
 */
enum HperlStatus hperl_scene_generate(uint64_t seed, struct HperlScene **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HperlStatus hperl_scene_read(const char *path, struct HperlScene **out);

/**
 * # Safety
 * `scene` must be a live handle and `path` a NUL-terminated string.
 */
enum HperlStatus hperl_scene_write(const struct HperlScene *scene, const char *path);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void hperl_scene_free(struct HperlScene *scene);

/**
 * # Safety
 * `scene` must be a live handle; `out` writable.
 */
enum HperlStatus hperl_scene_camera(const struct HperlScene *scene, struct HperlCamera *out);

/**
 * # Safety
 * `scene` must be a live handle; `out` writable.
 */
enum HperlStatus hperl_scene_num_pedestrians(const struct HperlScene *scene, size_t *out);

/**
 * Ground truth of pedestrian `index`: 26 doubles of 2D joints, 39 of 3D
 * joints, and the box center and size (3 each). Any output may be null.
 *
 * # Safety
 * `scene` must be a live handle; non-null outputs must have the sizes above.
 */
enum HperlStatus hperl_scene_pedestrian(const struct HperlScene *scene,
                                        size_t index,
                                        double *pose_2d,
                                        double *pose_3d,
                                        double *box_center,
                                        double *box_size);

/**
 * Number of LiDAR points of a scene.
 *
 * # Safety
 * `scene` must be a live handle; `out` writable.
 */
enum HperlStatus hperl_scene_num_points(const struct HperlScene *scene, size_t *out);

/**
 * Copy the scene's points as x, y, z, intensity quadruples.
 *
 * # Safety
 * `scene` must be a live handle; `out` must hold `capacity` doubles.
 */
enum HperlStatus hperl_scene_copy_points(const struct HperlScene *scene,
                                         double *out,
                                         size_t capacity);

/**
 * Encode `n` points (x, y, z, intensity quadruples) into a BEV grid over
 * `extents` (absolute coordinates).
 *
 * # Safety
 * `points` must hold `4 n` doubles; `extents` readable; `out` writable.
 */
enum HperlStatus hperl_bev_encode(const double *points,
                                  size_t n,
                                  const struct HperlExtents *extents,
                                  double resolution,
                                  struct HperlBev **out);

/**
 * Grid shape; the data is channel-major `[channels][rows][cols]`.
 *
 * # Safety
 * `bev` must be a live handle; outputs writable.
 */
enum HperlStatus hperl_bev_shape(const struct HperlBev *bev,
                                 size_t *channels,
                                 size_t *rows,
                                 size_t *cols);

/**
 * Borrowed pointer to the grid values; valid until the handle is freed.
 *
 * # Safety
 * `bev` must be null or a live handle.
 */
const double *hperl_bev_data(const struct HperlBev *bev);

/**
 * # Safety
 * `bev` must be null or a handle not yet freed.
 */
void hperl_bev_free(struct HperlBev *bev);

/**
 * Load a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HperlStatus hperl_model_load(const char *path, struct HperlModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void hperl_model_free(struct HperlModel *model);

/**
 * Run the model on a scene. `extents` are the dataset extents: absolute
 * x and z ranges, and a y slab relative to the fitted ground height.
 *
 * # Safety
 * `model` and `scene` must be live handles; `extents` readable; `out`
 * writable.
 */
enum HperlStatus hperl_model_predict(const struct HperlModel *model,
                                     const struct HperlScene *scene,
                                     const struct HperlExtents *extents,
                                     struct HperlPoses **out);

/**
 * # Safety
 * `poses` must be a live handle; `out` writable.
 */
enum HperlStatus hperl_poses_len(const struct HperlPoses *poses, size_t *out);

/**
 * Pose `index`: confidence, 26 doubles of 2D joints and 39 of 3D joints.
 * Any output may be null.
 *
 * # Safety
 * `poses` must be a live handle; non-null outputs must have the sizes above.
 */
enum HperlStatus hperl_poses_get(const struct HperlPoses *poses,
                                 size_t index,
                                 double *confidence,
                                 double *pose_2d,
                                 double *pose_3d);

/**
 * # Safety
 * `poses` must be null or a handle not yet freed.
 */
void hperl_poses_free(struct HperlPoses *poses);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HPERL_H */
