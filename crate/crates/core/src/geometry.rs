//! Camera model, skeletons, boxes, ground plane and left/right flips.
//!
//! Coordinates are camera-frame: x right, y down, z forward (depth), origin at
//! the camera center. "Up" is therefore the negative y direction and the
//! ground sits at a positive y.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of joints in every skeleton.
pub const NUM_JOINTS: usize = 13;

pub type Vec2 = [f64; 2];
pub type Vec3 = [f64; 3];

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm2(a: Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < f64::from(self.width)
            && self.cy >= 0.0
            && self.cy < f64::from(self.height);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// True when the principal point sits exactly on the vertical center line,
    /// which makes image flips and point-cloud flips commute with projection.
    pub fn is_lr_symmetric(&self) -> bool {
        self.cx * 2.0 == f64::from(self.width)
    }
}

/// Pinhole projection `(fx·x/z + cx, fy·y/z + cy)`.
pub fn project_point(cam: &CameraIntrinsics, p: Vec3) -> Result<Vec2> {
    if !(p[2] > 0.0) {
        return Err(Error::BehindCamera { z: p[2] });
    }
    Ok([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
}

/// The 2×3 Jacobian of [`project_point`] with respect to the 3D point.
pub fn project_point_jacobian(cam: &CameraIntrinsics, p: Vec3) -> Result<[[f64; 3]; 2]> {
    if !(p[2] > 0.0) {
        return Err(Error::BehindCamera { z: p[2] });
    }
    let iz = 1.0 / p[2];
    Ok([
        [cam.fx * iz, 0.0, -cam.fx * p[0] * iz * iz],
        [0.0, cam.fy * iz, -cam.fy * p[1] * iz * iz],
    ])
}

/// Joint naming and left/right pairing for the 13-joint skeleton.
///
/// The order is a dataset property recorded in the manifest; this type only
/// supplies the default and derives the mirror permutation from `l_`/`r_` names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointOrder {
    names: Vec<String>,
}

pub const DEFAULT_JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

impl Default for JointOrder {
    fn default() -> Self {
        Self {
            names: DEFAULT_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl JointOrder {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != NUM_JOINTS {
            return Err(Error::InvalidArgument(format!(
                "joint order needs {NUM_JOINTS} names, got {}",
                names.len()
            )));
        }
        let order = Self { names };
        for required in ["head", "l_shoulder", "r_shoulder"] {
            order.index_of(required)?;
        }
        // every side-specific joint needs its partner
        order.mirror_map()?;
        Ok(order)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("joint `{name}` missing from order")))
    }

    /// `map[j]` is the index of the joint that `j` becomes after a left/right flip.
    pub fn mirror_map(&self) -> Result<[usize; NUM_JOINTS]> {
        let mut map = [0; NUM_JOINTS];
        for (j, name) in self.names.iter().enumerate() {
            let partner = if let Some(rest) = name.strip_prefix("l_") {
                self.index_of(&format!("r_{rest}"))?
            } else if let Some(rest) = name.strip_prefix("r_") {
                self.index_of(&format!("l_{rest}"))?
            } else {
                j
            };
            map[j] = partner;
        }
        Ok(map)
    }

    pub fn head(&self) -> usize {
        self.index_of("head").expect("validated on construction")
    }

    pub fn shoulders(&self) -> (usize, usize) {
        (
            self.index_of("l_shoulder").expect("validated on construction"),
            self.index_of("r_shoulder").expect("validated on construction"),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton2D {
    pub joints: [Vec2; NUM_JOINTS],
    pub visible: [bool; NUM_JOINTS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton3D {
    pub joints: [Vec3; NUM_JOINTS],
    pub visible: [bool; NUM_JOINTS],
}

impl Skeleton2D {
    pub fn new(joints: [Vec2; NUM_JOINTS]) -> Self {
        Self {
            joints,
            visible: [true; NUM_JOINTS],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = *self;
        for j in &mut out.joints {
            j[0] += dx;
            j[1] += dy;
        }
        out
    }

    /// Tight bounding box of all joints.
    pub fn bounding_box(&self) -> Box2D {
        let mut b = Box2D::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for j in &self.joints {
            b.x1 = b.x1.min(j[0]);
            b.y1 = b.y1.min(j[1]);
            b.x2 = b.x2.max(j[0]);
            b.y2 = b.y2.max(j[1]);
        }
        b
    }

    /// Neck position, taken as the shoulder midpoint.
    pub fn neck(&self, order: &JointOrder) -> Vec2 {
        let (l, r) = order.shoulders();
        [
            0.5 * (self.joints[l][0] + self.joints[r][0]),
            0.5 * (self.joints[l][1] + self.joints[r][1]),
        ]
    }

    /// Head-to-neck distance, the PCKh reference length.
    pub fn head_segment(&self, order: &JointOrder) -> f64 {
        let head = self.joints[order.head()];
        let neck = self.neck(order);
        norm2([head[0] - neck[0], head[1] - neck[1]])
    }
}

impl Skeleton3D {
    pub fn new(joints: [Vec3; NUM_JOINTS]) -> Self {
        Self {
            joints,
            visible: [true; NUM_JOINTS],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn translated(&self, d: Vec3) -> Self {
        let mut out = *self;
        for j in &mut out.joints {
            j[0] += d[0];
            j[1] += d[1];
            j[2] += d[2];
        }
        out
    }

    /// Axis-aligned box around all joints.
    pub fn bounding_box(&self) -> Box3D {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for j in &self.joints {
            for a in 0..3 {
                lo[a] = lo[a].min(j[a]);
                hi[a] = hi[a].max(j[a]);
            }
        }
        Box3D::from_corners(lo, hi)
    }
}

pub fn project_skeleton(cam: &CameraIntrinsics, s: &Skeleton3D) -> Result<Skeleton2D> {
    let mut joints = [[0.0; 2]; NUM_JOINTS];
    for (j, p) in s.joints.iter().enumerate() {
        joints[j] = project_point(cam, *p).map_err(|_| Error::JointBehindCamera { joint: j, z: p[2] })?;
    }
    Ok(Skeleton2D {
        joints,
        visible: s.visible,
    })
}

/// Axis-aligned image box `(x1, y1)`–`(x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Vec2 {
        [0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned 3D box (no yaw). `size` is (w along x, h along y, l along z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
}

pub type AnchorBox3D = Box3D;

impl Box3D {
    pub const fn new(center: Vec3, size: Vec3) -> Self {
        Self { center, size }
    }

    pub fn from_corners(lo: Vec3, hi: Vec3) -> Self {
        Self {
            center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])],
            size: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        }
    }

    pub fn min(&self) -> Vec3 {
        [
            self.center[0] - 0.5 * self.size[0],
            self.center[1] - 0.5 * self.size[1],
            self.center[2] - 0.5 * self.size[2],
        ]
    }

    pub fn max(&self) -> Vec3 {
        [
            self.center[0] + 0.5 * self.size[0],
            self.center[1] + 0.5 * self.size[1],
            self.center[2] + 0.5 * self.size[2],
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|s| *s > 0.0 && s.is_finite()) && self.center.iter().all(|c| c.is_finite())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    pub fn padded(&self, pad: f64) -> Self {
        Self {
            center: self.center,
            size: [self.size[0] + 2.0 * pad, self.size[1] + 2.0 * pad, self.size[2] + 2.0 * pad],
        }
    }

    pub fn flipped_x(&self) -> Self {
        Self {
            center: [-self.center[0], self.center[1], self.center[2]],
            size: self.size,
        }
    }
}

/// Image footprint of a 3D box: the projection of its cross-section at the
/// center depth. Pose fitting in 2D and 3D both use this rectangle, which is
/// what keeps the two consistent.
pub fn project_box_section(cam: &CameraIntrinsics, b: &Box3D) -> Result<Box2D> {
    let z = b.center[2];
    let lo = project_point(cam, [b.center[0] - 0.5 * b.size[0], b.center[1] - 0.5 * b.size[1], z])?;
    let hi = project_point(cam, [b.center[0] + 0.5 * b.size[0], b.center[1] + 0.5 * b.size[1], z])?;
    Ok(Box2D::new(lo[0], lo[1], hi[0], hi[1]))
}

/// Inverse of [`project_box_section`] for a box of known metric height.
///
/// The depth follows from the pixel height alone, which is the monocular
/// scale ambiguity: a taller person further away gives the same box.
pub fn backproject_box(cam: &CameraIntrinsics, roi: &Box2D, height: f64, length: f64) -> Result<Box3D> {
    if !(roi.height() > 0.0 && roi.width() > 0.0) {
        return Err(Error::DegenerateBox(format!("{roi:?}")));
    }
    let z = cam.fy * height / roi.height();
    let w = roi.width() * z / cam.fx;
    let [u, v] = roi.center();
    Ok(Box3D::new(
        [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z],
        [w, height, length],
    ))
}

/// Plane in point-normal form `n · (r − r0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub point: Vec3,
}

/// Upward normal in the camera frame.
pub const GROUND_NORMAL: Vec3 = [0.0, -1.0, 0.0];

impl Plane {
    pub fn new(normal: Vec3, point: Vec3) -> Result<Self> {
        let len = dot3(normal, normal).sqrt();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::InvalidArgument("plane normal must be non-zero".into()));
        }
        Ok(Self {
            normal: [normal[0] / len, normal[1] / len, normal[2] / len],
            point,
        })
    }

    /// Horizontal plane `y = height` with the upward normal.
    pub fn horizontal(height: f64) -> Self {
        Self {
            normal: GROUND_NORMAL,
            point: [0.0, height, 0.0],
        }
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        dot3(self.normal, sub3(p, self.point))
    }

    /// Solve the plane equation for y at the given (x, z).
    pub fn y_at(&self, x: f64, z: f64) -> Result<f64> {
        let [a, b, c] = self.normal;
        if b == 0.0 {
            return Err(Error::InvalidArgument("plane is vertical; y is unconstrained".into()));
        }
        Ok(self.point[1] - (a * (x - self.point[0]) + c * (z - self.point[2])) / b)
    }

    /// Height of a horizontal plane.
    pub fn height(&self) -> f64 {
        self.point[1]
    }

    /// The same plane shifted by `dy` along the y axis.
    pub fn shifted_y(&self, dy: f64) -> Self {
        Self {
            normal: self.normal,
            point: [self.point[0], self.point[1] + dy, self.point[2]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vec3,
    pub intensity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Vertical offset from the fitted plane to the ground, in meters.
pub const GROUND_OFFSET: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub seed: u64,
    pub iterations: usize,
    pub inlier_threshold: f64,
    /// Added to the fitted height (towards +y, i.e. downwards).
    pub offset: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 100,
            inlier_threshold: 0.05,
            offset: GROUND_OFFSET,
        }
    }
}

/// RANSAC over plane heights with the normal pinned to `(0, −1, 0)`.
///
/// Each hypothesis is the height of one sampled point; the best consensus set
/// is refit by its mean height and the configured offset is then added.
pub fn fit_ground_plane(cloud: &PointCloud, params: &RansacParams) -> Result<Plane> {
    if cloud.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: cloud.len(),
        });
    }
    if !(params.inlier_threshold >= 0.0) {
        return Err(Error::InvalidArgument("inlier threshold must be non-negative".into()));
    }
    let heights: Vec<f64> = cloud.points.iter().map(|p| p.position[1]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best = (0usize, heights[0]);
    for _ in 0..params.iterations.max(1) {
        let candidate = heights[rng.random_range(0..heights.len())];
        let count = count_inliers(&heights, candidate, params.inlier_threshold);
        if count > best.0 {
            best = (count, candidate);
        }
    }
    // least-squares refit: mean height of the consensus set, twice
    let mut height = best.1;
    for _ in 0..2 {
        let (sum, n) = heights
            .iter()
            .filter(|y| (*y - height).abs() <= params.inlier_threshold)
            .fold((0.0, 0usize), |(s, n), y| (s + y, n + 1));
        if n > 0 {
            height = sum / n as f64;
        }
    }
    Ok(Plane::horizontal(height + params.offset))
}

pub(crate) fn count_inliers(heights: &[f64], h: f64, threshold: f64) -> usize {
    heights.iter().filter(|y| (*y - h).abs() <= threshold).count()
}

/// Left/right flip of a 2D pose in an image of width `image_width`: `x ↦ w − x`.
///
/// With `swap` set, side-specific joints also exchange labels so that e.g. the
/// left wrist of the flipped pose is the mirrored right wrist. Passing `None`
/// applies the bare coordinate formula.
pub fn flip_pose_2d(s: &Skeleton2D, image_width: f64, swap: Option<&JointOrder>) -> Skeleton2D {
    let mut out = *s;
    for j in &mut out.joints {
        j[0] = image_width - j[0];
    }
    if let Some(order) = swap {
        out = permute_2d(&out, &order.mirror_map().expect("validated on construction"));
    }
    out
}

/// Mirror a 3D pose through the `x = 0` plane.
pub fn flip_pose_3d(s: &Skeleton3D, swap: Option<&JointOrder>) -> Skeleton3D {
    let mut out = *s;
    for j in &mut out.joints {
        j[0] = -j[0];
    }
    if let Some(order) = swap {
        let map = order.mirror_map().expect("validated on construction");
        let src = out;
        for j in 0..NUM_JOINTS {
            out.joints[map[j]] = src.joints[j];
            out.visible[map[j]] = src.visible[j];
        }
    }
    out
}

fn permute_2d(s: &Skeleton2D, map: &[usize; NUM_JOINTS]) -> Skeleton2D {
    let mut out = *s;
    for j in 0..NUM_JOINTS {
        out.joints[map[j]] = s.joints[j];
        out.visible[map[j]] = s.visible[j];
    }
    out
}

/// Mirror a point cloud along the x axis, keeping order and intensities.
pub fn flip_cloud(cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| LidarPoint {
                position: [-p.position[0], p.position[1], p.position[2]],
                intensity: p.intensity,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        assert_eq!(project_point(&cam(), [0.0, 0.0, 5.0]).unwrap(), [50.0, 50.0]);
        assert_eq!(project_point(&cam(), [1.0, 2.0, 10.0]).unwrap(), [60.0, 70.0]);
    }

    #[test]
    fn behind_camera_is_an_error() {
        assert!(matches!(project_point(&cam(), [0.0, 0.0, 0.0]), Err(Error::BehindCamera { .. })));
        assert!(matches!(project_point(&cam(), [1.0, 0.0, -2.0]), Err(Error::BehindCamera { .. })));
        let mut s = Skeleton3D::new([[0.0, 0.0, 5.0]; NUM_JOINTS]);
        s.joints[7][2] = -1.0;
        assert!(matches!(
            project_skeleton(&cam(), &s),
            Err(Error::JointBehindCamera { joint: 7, .. })
        ));
    }

    #[test]
    fn jacobian_on_axis() {
        // frozen from central differences with step 1e-4
        let jac = project_point_jacobian(&cam(), [0.0, 0.0, 5.0]).unwrap();
        assert_eq!(jac, [[20.0, 0.0, 0.0], [0.0, 20.0, 0.0]]);
    }

    #[test]
    fn skeleton_at_one_point_projects_to_principal_point() {
        let s = Skeleton3D::new([[0.0, 0.0, 5.0]; NUM_JOINTS]);
        let p = project_skeleton(&cam(), &s).unwrap();
        assert!(p.joints.iter().all(|j| *j == [50.0, 50.0]));
    }

    #[test]
    fn invalid_camera_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn flip_pose_formula() {
        let mut s = Skeleton2D::new([[0.0, 0.0]; NUM_JOINTS]);
        s.joints[0] = [0.0, 3.0];
        s.joints[1] = [30.0, 4.0];
        let f = flip_pose_2d(&s, 100.0, None);
        assert_eq!(f.joints[0], [100.0, 3.0]);
        assert_eq!(f.joints[1], [70.0, 4.0]);
    }

    #[test]
    fn flip_with_swap_exchanges_sides() {
        let order = JointOrder::default();
        let mut s = Skeleton2D::new([[50.0, 0.0]; NUM_JOINTS]);
        s.joints[order.index_of("l_wrist").unwrap()] = [10.0, 1.0];
        s.visible[order.index_of("l_wrist").unwrap()] = false;
        let f = flip_pose_2d(&s, 100.0, Some(&order));
        let r = order.index_of("r_wrist").unwrap();
        assert_eq!(f.joints[r], [90.0, 1.0]);
        assert!(!f.visible[r]);
        assert_eq!(flip_pose_2d(&f, 100.0, Some(&order)), s);
    }

    #[test]
    fn mirror_map_is_an_involution() {
        let map = JointOrder::default().mirror_map().unwrap();
        for j in 0..NUM_JOINTS {
            assert_eq!(map[map[j]], j);
        }
        assert_eq!(map[0], 0);
    }

    #[test]
    fn joint_order_rejects_unpaired_side() {
        let mut names: Vec<String> = DEFAULT_JOINT_NAMES.iter().map(|s| s.to_string()).collect();
        names[12] = "tail".into();
        assert!(JointOrder::new(names).is_err());
    }

    #[test]
    fn flip_cloud_negates_x() {
        let c = PointCloud::new(vec![LidarPoint {
            position: [1.0, 2.0, 3.0],
            intensity: 0.4,
        }]);
        let f = flip_cloud(&c);
        assert_eq!(f.points[0].position, [-1.0, 2.0, 3.0]);
        assert_eq!(f.points[0].intensity, 0.4);
        assert_eq!(flip_cloud(&f), c);
    }

    fn flat_cloud(y: f64, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|i| LidarPoint {
                    position: [i as f64 * 0.1, y, 5.0 + i as f64 * 0.2],
                    intensity: 0.1,
                })
                .collect(),
        )
    }

    #[test]
    fn ransac_exact_consensus() {
        let params = RansacParams {
            offset: 0.0,
            ..Default::default()
        };
        let plane = fit_ground_plane(&flat_cloud(1.0, 50), &params).unwrap();
        assert_eq!(plane.height(), 1.0);
        assert_eq!(plane.normal, GROUND_NORMAL);
    }

    #[test]
    fn ransac_applies_ground_offset() {
        let plane = fit_ground_plane(&flat_cloud(0.0, 20), &RansacParams::default()).unwrap();
        assert_eq!(plane.height(), 1.8);
    }

    #[test]
    fn ransac_needs_three_points() {
        assert!(matches!(
            fit_ground_plane(&flat_cloud(0.0, 2), &RansacParams::default()),
            Err(Error::TooFewPoints { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn plane_solves_for_y() {
        let p = Plane::new([0.0, -2.0, 0.0], [0.0, 1.5, 0.0]).unwrap();
        assert_eq!(p.normal, GROUND_NORMAL);
        assert_eq!(p.y_at(3.0, 7.0).unwrap(), 1.5);
        let tilted = Plane::new([0.1, -1.0, 0.05], [0.0, 1.6, 10.0]).unwrap();
        let y = tilted.y_at(2.0, 14.0).unwrap();
        assert!(tilted.signed_distance([2.0, y, 14.0]).abs() < 1e-12);
    }

    #[test]
    fn box_section_roundtrip() {
        let cam = CameraIntrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120).unwrap();
        let b = Box3D::new([1.0, 0.7, 12.0], [0.6, 1.8, 0.5]);
        let roi = project_box_section(&cam, &b).unwrap();
        let back = backproject_box(&cam, &roi, 1.8, 0.5).unwrap();
        for a in 0..3 {
            assert!((back.center[a] - b.center[a]).abs() < 1e-12);
            assert!((back.size[a] - b.size[a]).abs() < 1e-12);
        }
    }
}
