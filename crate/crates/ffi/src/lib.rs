//! C ABI over `hperl-core`.
//!
//! Every function returns an [`HperlStatus`]; on failure a message is kept
//! per thread and can be read with [`hperl_last_error_message`]. Scenes, BEV
//! grids, models and pose lists are opaque handles owned by the caller and
//! released with the matching `*_free` function. Panics never cross the
//! boundary; they surface as `HPERL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hperl_core::bev::{encode_bev, AreaExtents, BevGrid, BEV_CHANNELS};
use hperl_core::evalkit::{cde, xye, FinalPose};
use hperl_core::geometry::{
    fit_ground_plane, project_point, Box3D, CameraIntrinsics, LidarPoint, PointCloud, RansacParams, Skeleton3D,
    NUM_JOINTS,
};
use hperl_core::synthgen::{generate_scene, read_scene, write_scene, Scene, SceneConfig};
use hperl_core::toynet::train::{predict_scene, TrainState};
use hperl_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HperlStatus {
    Ok = 0,
    NullArg = 1,
    InvalidArg = 2,
    BehindCamera = 3,
    Io = 4,
    Format = 5,
    Checksum = 6,
    Numeric = 7,
    Panic = 8,
}

/// Pinhole intrinsics, pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HperlCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Axis-aligned region in camera coordinates, meters.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HperlExtents {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

pub struct HperlScene {
    scene: Scene,
}

pub struct HperlBev {
    grid: BevGrid,
}

pub struct HperlModel {
    state: TrainState,
}

pub struct HperlPoses {
    poses: Vec<FinalPose>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(HperlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::BehindCamera { .. } | Error::JointBehindCamera { .. } => HperlStatus::BehindCamera,
            Error::Io { .. } => HperlStatus::Io,
            Error::Format { .. } | Error::Truncated { .. } | Error::VersionMismatch { .. } => HperlStatus::Format,
            Error::Checksum { .. } => HperlStatus::Checksum,
            Error::NonFinite { .. } | Error::Diverged { .. } => HperlStatus::Numeric,
            _ => HperlStatus::InvalidArg,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HperlStatus::NullArg, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HperlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HperlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            HperlStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: the caller guarantees `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `n` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `n` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, n) })
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(HperlStatus::InvalidArg, "path is not valid UTF-8".into()))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    // SAFETY: `out` is non-null and the caller guarantees it is writable.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(p) });
    }
}

fn camera(c: &HperlCamera) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        width: c.width,
        height: c.height,
    }
}

fn extents(e: &HperlExtents) -> AreaExtents {
    AreaExtents {
        x_min: e.x_min,
        x_max: e.x_max,
        y_min: e.y_min,
        y_max: e.y_max,
        z_min: e.z_min,
        z_max: e.z_max,
    }
}

fn cloud(points: &[f64]) -> Result<PointCloud, Fail> {
    if points.len() % 4 != 0 {
        return Err(Fail(HperlStatus::InvalidArg, "points must be x, y, z, intensity quadruples".into()));
    }
    Ok(PointCloud::new(
        points
            .chunks_exact(4)
            .map(|p| LidarPoint {
                position: [p[0], p[1], p[2]],
                intensity: p[3],
            })
            .collect(),
    ))
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hperl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` holds `len` bytes and `n < len`.
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hperl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Project a camera-frame point to pixels.
///
/// # Safety
/// `point` must hold 3 doubles and `out_uv` 2.
#[no_mangle]
pub unsafe extern "C" fn hperl_project_point(cam: *const HperlCamera, point: *const f64, out_uv: *mut f64) -> HperlStatus {
    guard(|| {
        let cam = camera(unsafe { borrow(cam, "camera") }?);
        let p = unsafe { slice(point, 3, "point") }?;
        let out = unsafe { slice_mut(out_uv, 2, "out_uv") }?;
        cam.validate()?;
        let uv = project_point(&cam, [p[0], p[1], p[2]])?;
        out.copy_from_slice(&uv);
        Ok(())
    })
}

/// RANSAC ground plane of `n` points given as x, y, z, intensity quadruples.
/// Writes the plane normal and a point on it.
///
/// # Safety
/// `points` must hold `4 n` doubles; `out_normal` and `out_point` 3 each.
#[no_mangle]
pub unsafe extern "C" fn hperl_fit_ground_plane(
    points: *const f64,
    n: usize,
    seed: u64,
    offset: f64,
    out_normal: *mut f64,
    out_point: *mut f64,
) -> HperlStatus {
    guard(|| {
        let pts = unsafe { slice(points, 4 * n, "points") }?;
        let normal = unsafe { slice_mut(out_normal, 3, "out_normal") }?;
        let point = unsafe { slice_mut(out_point, 3, "out_point") }?;
        let plane = fit_ground_plane(
            &cloud(pts)?,
            &RansacParams {
                seed,
                offset,
                ..RansacParams::default()
            },
        )?;
        normal.copy_from_slice(&plane.normal);
        point.copy_from_slice(&plane.point);
        Ok(())
    })
}

/// Center depth error of a 13-joint pose (39 doubles) against a box.
///
/// # Safety
/// `pose_3d` must hold 39 doubles, `center` and `size` 3 each.
#[no_mangle]
pub unsafe extern "C" fn hperl_cde(pose_3d: *const f64, center: *const f64, size: *const f64, out: *mut f64) -> HperlStatus {
    metric(pose_3d, center, size, out, cde)
}

/// Center error orthogonal to depth; arguments as [`hperl_cde`].
///
/// # Safety
/// As [`hperl_cde`].
#[no_mangle]
pub unsafe extern "C" fn hperl_xye(pose_3d: *const f64, center: *const f64, size: *const f64, out: *mut f64) -> HperlStatus {
    metric(pose_3d, center, size, out, xye)
}

/// # Safety
/// As [`hperl_cde`].
unsafe fn metric(
    pose_3d: *const f64,
    center: *const f64,
    size: *const f64,
    out: *mut f64,
    f: fn(&Skeleton3D, &Box3D) -> f64,
) -> HperlStatus {
    guard(|| {
        let p = unsafe { slice(pose_3d, 3 * NUM_JOINTS, "pose_3d") }?;
        let c = unsafe { slice(center, 3, "center") }?;
        let s = unsafe { slice(size, 3, "size") }?;
        let out = unsafe { slice_mut(out, 1, "out") }?;
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, v) in joints.iter_mut().zip(p.chunks_exact(3)) {
            j.copy_from_slice(v);
        }
        let b = Box3D::new([c[0], c[1], c[2]], [s[0], s[1], s[2]]);
        out[0] = f(&Skeleton3D::new(joints), &b);
        Ok(())
    })
}

/// Generate one synthetic scene with the default scene settings.
///
/// # Safety
/// `out` must be valid for writing a handle.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_generate(seed: u64, out: *mut *mut HperlScene) -> HperlStatus {
    guard(|| {
        let scene = generate_scene(seed, &SceneConfig::default())?;
        unsafe { store(out, HperlScene { scene }) }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_read(path: *const c_char, out: *mut *mut HperlScene) -> HperlStatus {
    guard(|| {
        let scene = read_scene(&unsafe { self::path(path) }?)?;
        unsafe { store(out, HperlScene { scene }) }
    })
}

/// # Safety
/// `scene` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_write(scene: *const HperlScene, path: *const c_char) -> HperlStatus {
    guard(|| {
        let s = unsafe { borrow(scene, "scene") }?;
        write_scene(&s.scene, &unsafe { self::path(path) }?)?;
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_free(scene: *mut HperlScene) {
    unsafe { free(scene) }
}

/// # Safety
/// `scene` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_camera(scene: *const HperlScene, out: *mut HperlCamera) -> HperlStatus {
    guard(|| {
        let c = unsafe { borrow(scene, "scene") }?.scene.camera;
        let out = unsafe { slice_mut(out, 1, "out") }?;
        out[0] = HperlCamera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        };
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_num_pedestrians(scene: *const HperlScene, out: *mut usize) -> HperlStatus {
    guard(|| {
        let s = unsafe { borrow(scene, "scene") }?;
        unsafe { slice_mut(out, 1, "out") }?[0] = s.scene.gt.len();
        Ok(())
    })
}

/// Ground truth of pedestrian `index`: 26 doubles of 2D joints, 39 of 3D
/// joints, and the box center and size (3 each). Any output may be null.
///
/// # Safety
/// `scene` must be a live handle; non-null outputs must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_pedestrian(
    scene: *const HperlScene,
    index: usize,
    pose_2d: *mut f64,
    pose_3d: *mut f64,
    box_center: *mut f64,
    box_size: *mut f64,
) -> HperlStatus {
    guard(|| {
        let s = unsafe { borrow(scene, "scene") }?;
        let p = s
            .scene
            .gt
            .get(index)
            .ok_or_else(|| Fail(HperlStatus::InvalidArg, format!("pedestrian {index} out of range")))?;
        if !pose_2d.is_null() {
            let o = unsafe { slice_mut(pose_2d, 2 * NUM_JOINTS, "pose_2d") }?;
            for (dst, j) in o.chunks_exact_mut(2).zip(&p.pose_2d.joints) {
                dst.copy_from_slice(j);
            }
        }
        if !pose_3d.is_null() {
            let o = unsafe { slice_mut(pose_3d, 3 * NUM_JOINTS, "pose_3d") }?;
            for (dst, j) in o.chunks_exact_mut(3).zip(&p.pose_3d.joints) {
                dst.copy_from_slice(j);
            }
        }
        if !box_center.is_null() {
            unsafe { slice_mut(box_center, 3, "box_center") }?.copy_from_slice(&p.box_3d.center);
        }
        if !box_size.is_null() {
            unsafe { slice_mut(box_size, 3, "box_size") }?.copy_from_slice(&p.box_3d.size);
        }
        Ok(())
    })
}

/// Number of LiDAR points of a scene.
///
/// # Safety
/// `scene` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_num_points(scene: *const HperlScene, out: *mut usize) -> HperlStatus {
    guard(|| {
        let s = unsafe { borrow(scene, "scene") }?;
        unsafe { slice_mut(out, 1, "out") }?[0] = s.scene.cloud.len();
        Ok(())
    })
}

/// Copy the scene's points as x, y, z, intensity quadruples.
///
/// # Safety
/// `scene` must be a live handle; `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn hperl_scene_copy_points(scene: *const HperlScene, out: *mut f64, capacity: usize) -> HperlStatus {
    guard(|| {
        let s = unsafe { borrow(scene, "scene") }?;
        let need = 4 * s.scene.cloud.len();
        if capacity < need {
            return Err(Fail(HperlStatus::InvalidArg, format!("buffer holds {capacity} doubles, {need} needed")));
        }
        let o = unsafe { slice_mut(out, need, "out") }?;
        for (dst, p) in o.chunks_exact_mut(4).zip(&s.scene.cloud.points) {
            dst[..3].copy_from_slice(&p.position);
            dst[3] = p.intensity;
        }
        Ok(())
    })
}

/// Encode `n` points (x, y, z, intensity quadruples) into a BEV grid over
/// `extents` (absolute coordinates).
///
/// # Safety
/// `points` must hold `4 n` doubles; `extents` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_bev_encode(
    points: *const f64,
    n: usize,
    extents: *const HperlExtents,
    resolution: f64,
    out: *mut *mut HperlBev,
) -> HperlStatus {
    guard(|| {
        let pts = unsafe { slice(points, 4 * n, "points") }?;
        let ext = self::extents(unsafe { borrow(extents, "extents") }?);
        let grid = encode_bev(&cloud(pts)?, &ext, resolution)?;
        unsafe { store(out, HperlBev { grid }) }
    })
}

/// Grid shape; the data is channel-major `[channels][rows][cols]`.
///
/// # Safety
/// `bev` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_bev_shape(bev: *const HperlBev, channels: *mut usize, rows: *mut usize, cols: *mut usize) -> HperlStatus {
    guard(|| {
        let g = &unsafe { borrow(bev, "bev") }?.grid;
        unsafe { slice_mut(channels, 1, "channels") }?[0] = BEV_CHANNELS;
        unsafe { slice_mut(rows, 1, "rows") }?[0] = g.rows;
        unsafe { slice_mut(cols, 1, "cols") }?[0] = g.cols;
        Ok(())
    })
}

/// Borrowed pointer to the grid values; valid until the handle is freed.
///
/// # Safety
/// `bev` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hperl_bev_data(bev: *const HperlBev) -> *const f64 {
    match unsafe { bev.as_ref() } {
        Some(b) => b.grid.data.as_ptr(),
        None => std::ptr::null(),
    }
}

/// # Safety
/// `bev` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hperl_bev_free(bev: *mut HperlBev) {
    unsafe { free(bev) }
}

/// Load a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_model_load(path: *const c_char, out: *mut *mut HperlModel) -> HperlStatus {
    guard(|| {
        let state = TrainState::load(&unsafe { self::path(path) }?)?;
        unsafe { store(out, HperlModel { state }) }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hperl_model_free(model: *mut HperlModel) {
    unsafe { free(model) }
}

/// Run the model on a scene. `extents` are the dataset extents: absolute
/// x and z ranges, and a y slab relative to the fitted ground height.
///
/// # Safety
/// `model` and `scene` must be live handles; `extents` readable; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_model_predict(
    model: *const HperlModel,
    scene: *const HperlScene,
    extents: *const HperlExtents,
    out: *mut *mut HperlPoses,
) -> HperlStatus {
    guard(|| {
        let m = unsafe { borrow(model, "model") }?;
        let s = unsafe { borrow(scene, "scene") }?;
        let ext = self::extents(unsafe { borrow(extents, "extents") }?);
        let poses = predict_scene(&m.state.model, &s.scene, &ext)?;
        unsafe { store(out, HperlPoses { poses }) }
    })
}

/// # Safety
/// `poses` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hperl_poses_len(poses: *const HperlPoses, out: *mut usize) -> HperlStatus {
    guard(|| {
        let p = unsafe { borrow(poses, "poses") }?;
        unsafe { slice_mut(out, 1, "out") }?[0] = p.poses.len();
        Ok(())
    })
}

/// Pose `index`: confidence, 26 doubles of 2D joints and 39 of 3D joints.
/// Any output may be null.
///
/// # Safety
/// `poses` must be a live handle; non-null outputs must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn hperl_poses_get(
    poses: *const HperlPoses,
    index: usize,
    confidence: *mut f64,
    pose_2d: *mut f64,
    pose_3d: *mut f64,
) -> HperlStatus {
    guard(|| {
        let p = unsafe { borrow(poses, "poses") }?;
        let f = p
            .poses
            .get(index)
            .ok_or_else(|| Fail(HperlStatus::InvalidArg, format!("pose {index} out of range")))?;
        if !confidence.is_null() {
            unsafe { slice_mut(confidence, 1, "confidence") }?[0] = f.confidence;
        }
        if !pose_2d.is_null() {
            let o = unsafe { slice_mut(pose_2d, 2 * NUM_JOINTS, "pose_2d") }?;
            for (dst, j) in o.chunks_exact_mut(2).zip(&f.pose_2d.joints) {
                dst.copy_from_slice(j);
            }
        }
        if !pose_3d.is_null() {
            let o = unsafe { slice_mut(pose_3d, 3 * NUM_JOINTS, "pose_3d") }?;
            for (dst, j) in o.chunks_exact_mut(3).zip(&f.pose_3d.joints) {
                dst.copy_from_slice(j);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `poses` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hperl_poses_free(poses: *mut HperlPoses) {
    unsafe { free(poses) }
}
