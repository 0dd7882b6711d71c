//! 3D anchor-box lattice and the canonical anchor poses.
//!
//! Anchor poses come in two forms: a metric 3D shape in a unit-height,
//! origin-centered frame (y down after loading), and a 2D form normalized to
//! the unit box `[0,1]²` with the feet on `v = 1`. Both are fitted into boxes
//! here; the 3D fit places every joint on the viewing ray through the matching
//! point of the box's center cross-section so that projecting a 3D fit gives
//! exactly the 2D fit of the projected box.

use std::path::Path;

use crate::bev::AreaExtents;
use crate::error::{Error, Result};
use crate::geometry::{AnchorBox3D, Box2D, Plane, Skeleton2D, Skeleton3D, Vec3, NUM_JOINTS};

/// Default number of anchor poses.
pub const NUM_ANCHOR_POSES: usize = 8;

/// Default pedestrian anchor size (w, h, l) in meters.
pub const PEDESTRIAN_TEMPLATE: Vec3 = [0.8, 1.8, 0.8];

/// Lattice spacing of the anchor grid in meters.
pub const ANCHOR_STRIDE: f64 = 0.2;

const DEFAULT_POSES_CSV: &str = include_str!("../data/anchor_poses.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPose {
    /// Unit-height metric shape, y down, centered on its bounding box.
    pub shape: Skeleton3D,
    /// Unit-box 2D form, `(u, v) ∈ [0, 1]²`.
    pub unit: Skeleton2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPoseSet {
    poses: Vec<AnchorPose>,
}

impl Default for AnchorPoseSet {
    fn default() -> Self {
        Self::parse(DEFAULT_POSES_CSV, NUM_ANCHOR_POSES).expect("bundled anchor poses are valid")
    }
}

impl AnchorPoseSet {
    pub fn load(path: &Path, expected_k: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected_k)
    }

    /// Parse `pose_id,joint_id,x,y,z,u,v` records. The file stores y up; it is
    /// negated here to match the y-down camera frame.
    pub fn parse(text: &str, expected_k: usize) -> Result<Self> {
        let mut rows: Vec<(usize, usize, [f64; 5])> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("pose_id") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 7 {
                return Err(Error::AnchorData(format!(
                    "line {}: expected 7 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let bad = |what: &str| Error::AnchorData(format!("line {}: bad {what}", lineno + 1));
            let pose: usize = fields[0].parse().map_err(|_| bad("pose_id"))?;
            let joint: usize = fields[1].parse().map_err(|_| bad("joint_id"))?;
            let mut vals = [0.0f64; 5];
            for (v, f) in vals.iter_mut().zip(&fields[2..]) {
                *v = f.parse().map_err(|_| bad("coordinate"))?;
                if !v.is_finite() {
                    return Err(bad("coordinate"));
                }
            }
            rows.push((pose, joint, vals));
        }
        let k = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        if k != expected_k {
            return Err(Error::AnchorData(format!("expected {expected_k} poses, found {k}")));
        }
        let mut seen = vec![[false; NUM_JOINTS]; k];
        let mut poses = vec![
            AnchorPose {
                shape: Skeleton3D::new([[0.0; 3]; NUM_JOINTS]),
                unit: Skeleton2D::new([[0.0; 2]; NUM_JOINTS]),
            };
            k
        ];
        for (pose, joint, [x, y, z, u, v]) in rows {
            if joint >= NUM_JOINTS {
                return Err(Error::AnchorData(format!("joint id {joint} out of range")));
            }
            if seen[pose][joint] {
                return Err(Error::AnchorData(format!("duplicate record for pose {pose} joint {joint}")));
            }
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(Error::AnchorData(format!("pose {pose} joint {joint}: (u, v) outside unit box")));
            }
            seen[pose][joint] = true;
            poses[pose].shape.joints[joint] = [x, -y, z];
            poses[pose].unit.joints[joint] = [u, v];
        }
        if let Some(pose) = seen.iter().position(|s| s.iter().any(|b| !b)) {
            return Err(Error::AnchorData(format!("pose {pose} is missing joints")));
        }
        Ok(Self { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, k: usize) -> Result<&AnchorPose> {
        self.poses
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("anchor pose {k} out of range (K = {})", self.len())))
    }

    pub fn iter(&self) -> impl Iterator<Item = &AnchorPose> {
        self.poses.iter()
    }
}

fn lattice_count(span: f64, stride: f64) -> usize {
    ((span / stride) + 1e-9).floor() as usize + 1
}

/// Anchors at every `(x, z)` lattice point of the extents, with y taken from
/// the plane equation.
pub fn generate_anchor_grid(
    plane: &Plane,
    extents: &AreaExtents,
    stride: f64,
    template_size: Vec3,
) -> Result<Vec<AnchorBox3D>> {
    if !(stride > 0.0) {
        return Err(Error::InvalidArgument("anchor stride must be positive".into()));
    }
    let nx = lattice_count(extents.x_max - extents.x_min, stride);
    let nz = lattice_count(extents.z_max - extents.z_min, stride);
    let mut anchors = Vec::with_capacity(nx * nz);
    for iz in 0..nz {
        let z = extents.z_min + iz as f64 * stride;
        for ix in 0..nx {
            let x = extents.x_min + ix as f64 * stride;
            let y = plane.y_at(x, z)?;
            anchors.push(AnchorBox3D::new([x, y, z], template_size));
        }
    }
    Ok(anchors)
}

/// Area extents from ground-truth locations, grown by one stride on each side.
/// The lateral range is made symmetric about `x = 0` so that left/right
/// flipped scenes rasterize onto the same grid.
pub fn extents_from_locations(centers: &[Vec3], stride: f64, slab: (f64, f64)) -> Result<AreaExtents> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth locations".into()));
    }
    let (mut x_abs, mut z_min, mut z_max) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for c in centers {
        x_abs = x_abs.max(c[0].abs());
        z_min = z_min.min(c[2]);
        z_max = z_max.max(c[2]);
    }
    let ext = AreaExtents {
        x_min: -(x_abs + stride),
        x_max: x_abs + stride,
        y_min: slab.0,
        y_max: slab.1,
        z_min: z_min - stride,
        z_max: z_max + stride,
    };
    ext.validate()?;
    Ok(ext)
}

/// Fit anchor pose `k` into an image RoI: scale the unit-box pose by the RoI
/// size and offset it by the box corner, so the feet rest on the bottom edge.
pub fn fit_anchor_pose_to_roi(set: &AnchorPoseSet, k: usize, roi: &Box2D) -> Result<Skeleton2D> {
    if !(roi.width() > 0.0 && roi.height() > 0.0) || !roi.is_finite() {
        return Err(Error::DegenerateBox(format!("{roi:?}")));
    }
    let unit = &set.get(k)?.unit;
    let mut out = *unit;
    for (dst, src) in out.joints.iter_mut().zip(&unit.joints) {
        *dst = [roi.x1 + src[0] * roi.width(), roi.y1 + src[1] * roi.height()];
    }
    Ok(out)
}

/// Fit anchor pose `k` into a 3D box.
///
/// Depth offsets keep the metric shape scaled by the box height; lateral and
/// vertical placement fill the box's center cross-section and are carried
/// along the viewing ray to each joint's depth.
pub fn fit_anchor_pose_3d(set: &AnchorPoseSet, k: usize, b: &AnchorBox3D) -> Result<Skeleton3D> {
    if !b.is_valid() {
        return Err(Error::DegenerateBox(format!("{b:?}")));
    }
    let pose = set.get(k)?;
    let [cx, cy, cz] = b.center;
    let [w, h, _] = b.size;
    let mut out = pose.shape;
    for j in 0..NUM_JOINTS {
        let [u, v] = pose.unit.joints[j];
        let z = cz + h * pose.shape.joints[j][2];
        let ray = if cz > 0.0 { z / cz } else { 1.0 };
        out.joints[j] = [(cx + w * (u - 0.5)) * ray, (cy + h * (v - 0.5)) * ray, z];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_box_section, project_skeleton, CameraIntrinsics};

    #[test]
    fn bundled_set_has_eight_full_body_poses() {
        let set = AnchorPoseSet::default();
        assert_eq!(set.len(), 8);
        for p in set.iter() {
            let ys: Vec<f64> = p.shape.joints.iter().map(|j| j[1]).collect();
            let span = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
            assert!((span - 1.0).abs() < 1e-5, "unit height, got {span}");
            let bb = p.unit.bounding_box();
            assert!(bb.x1.abs() < 1e-6 && bb.y1.abs() < 1e-6);
            assert!((bb.x2 - 1.0).abs() < 1e-6 && (bb.y2 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loader_negates_y() {
        let set = AnchorPoseSet::default();
        // the head is above the feet, i.e. at smaller y after negation
        let stand = &set.get(0).unwrap().shape;
        assert!(stand.joints[0][1] < stand.joints[11][1]);
        assert_eq!(stand.joints[0][1], -0.5);
    }

    #[test]
    fn loader_rejects_wrong_cardinality() {
        let text: String = DEFAULT_POSES_CSV
            .lines()
            .filter(|l| !l.starts_with("7,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(AnchorPoseSet::parse(&text, 8), Err(Error::AnchorData(_))));
        assert!(AnchorPoseSet::parse(&text, 7).is_ok());
        let missing: String = DEFAULT_POSES_CSV
            .lines()
            .filter(|l| !l.starts_with("3,5,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(AnchorPoseSet::parse(&missing, 8).is_err());
        assert!(AnchorPoseSet::parse("0,0,1,2,3\n", 1).is_err());
    }

    #[test]
    fn lattice_counts() {
        let ext = AreaExtents {
            x_min: 0.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
            z_min: 5.0,
            z_max: 6.0,
        };
        let grid = generate_anchor_grid(&Plane::horizontal(1.8), &ext, 0.2, PEDESTRIAN_TEMPLATE).unwrap();
        assert_eq!(grid.len(), 36);
        assert!(grid.iter().all(|a| a.center[1] == 1.8));

        let big = AreaExtents {
            x_min: -20.0,
            x_max: 20.0,
            z_min: 0.0,
            z_max: 40.0,
            ..ext
        };
        let grid = generate_anchor_grid(&Plane::horizontal(1.8), &big, ANCHOR_STRIDE, PEDESTRIAN_TEMPLATE).unwrap();
        assert_eq!(grid.len(), 201 * 201);
    }

    #[test]
    fn roi_fit_bounds() {
        let set = AnchorPoseSet::default();
        let roi = Box2D::new(0.0, 0.0, 100.0, 200.0);
        for k in 0..set.len() {
            let s = fit_anchor_pose_to_roi(&set, k, &roi).unwrap();
            let bb = s.bounding_box();
            assert!(bb.x1 >= 0.0 && bb.x2 <= 100.0 && bb.y1 >= 0.0);
            assert_eq!(bb.y2, 200.0);
        }
        assert!(fit_anchor_pose_to_roi(&set, 0, &Box2D::new(0.0, 0.0, 0.0, 10.0)).is_err());
        assert!(fit_anchor_pose_to_roi(&set, 8, &roi).is_err());
    }

    #[test]
    fn roi_fit_is_translation_equivariant() {
        let set = AnchorPoseSet::default();
        let roi = Box2D::new(3.0, 4.0, 40.0, 90.0);
        let a = fit_anchor_pose_to_roi(&set, 4, &roi).unwrap();
        let b = fit_anchor_pose_to_roi(&set, 4, &roi.translated(10.0, 20.0)).unwrap();
        for j in 0..NUM_JOINTS {
            assert!((b.joints[j][0] - a.joints[j][0] - 10.0).abs() < 1e-12);
            assert!((b.joints[j][1] - a.joints[j][1] - 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_3d_vertical_span_matches_box_height() {
        let set = AnchorPoseSet::default();
        let b = AnchorBox3D::new([1.0, 0.7, 12.0], [0.8, 1.8, 0.8]);
        let s = fit_anchor_pose_3d(&set, 0, &b).unwrap();
        let bb = s.bounding_box();
        assert!((bb.size[1] - 1.8).abs() < 1e-12);
        assert!((bb.max()[1] - b.max()[1]).abs() < 1e-12, "feet on the bottom face");
    }

    #[test]
    fn fit_3d_on_axis_is_centered() {
        let cam = CameraIntrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120).unwrap();
        let set = AnchorPoseSet::default();
        let b = AnchorBox3D::new([0.0, 0.7, 10.0], [0.8, 1.8, 0.8]);
        let s = fit_anchor_pose_3d(&set, 0, &b).unwrap();
        let p = project_skeleton(&cam, &s).unwrap();
        let bb = p.bounding_box();
        assert!((bb.center()[0] - cam.cx).abs() < 1e-9);
    }

    #[test]
    fn fit_3d_projects_onto_2d_fit() {
        let cam = CameraIntrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120).unwrap();
        let set = AnchorPoseSet::default();
        for k in 0..set.len() {
            let b = AnchorBox3D::new([-1.3, 0.6, 7.5], [0.7, 1.7, 0.6]);
            let s3 = fit_anchor_pose_3d(&set, k, &b).unwrap();
            let proj = project_skeleton(&cam, &s3).unwrap();
            let fit = fit_anchor_pose_to_roi(&set, k, &project_box_section(&cam, &b).unwrap()).unwrap();
            for j in 0..NUM_JOINTS {
                assert!((proj.joints[j][0] - fit.joints[j][0]).abs() < 1e-9);
                assert!((proj.joints[j][1] - fit.joints[j][1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extents_cover_locations() {
        let ext = extents_from_locations(&[[1.0, 0.0, 5.0], [-3.0, 0.0, 20.0]], 0.2, (-1.0, 1.0)).unwrap();
        assert_eq!(ext.x_min, -3.2);
        assert_eq!(ext.x_max, 3.2);
        assert!((ext.z_min - 4.8).abs() < 1e-12 && (ext.z_max - 20.2).abs() < 1e-12);
    }
}
