//! Deterministic synthetic street scenes with exact ground truth.
//!
//! Pedestrians are anchor poses scaled to a sampled height with bounded joint
//! noise, standing on a flat ground. Bodies are capsules; the camera image is
//! ray-cast with flat shading and the LiDAR is a fixed elevation × azimuth ray
//! grid from the camera origin, so far pedestrians receive few returns.

mod dataset;
pub mod raycast;

pub use dataset::{
    generate_dataset, read_dataset, read_scene, write_dataset, write_scene, Dataset, DatasetConfig, DatasetManifest,
    DEFAULT_SLAB, SCENE_FORMAT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::AnchorPoseSet;
use crate::error::{Error, Result};
use crate::geometry::{
    flip_cloud, flip_pose_2d, flip_pose_3d, project_box_section, project_skeleton, Box2D, Box3D, CameraIntrinsics,
    JointOrder, LidarPoint, PointCloud, Skeleton2D, Skeleton3D, Vec3, NUM_JOINTS,
};
use raycast::{point_at, ray_box, ray_capsule, ray_ground, Capsule};

/// Padding between the joints and the faces of a ground-truth box, meters.
pub const BODY_PADDING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major RGB in `[0, 1]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pedestrian {
    pub pose_3d: Skeleton3D,
    pub pose_2d: Skeleton2D,
    pub box_3d: Box3D,
    pub box_2d: Box2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub camera: CameraIntrinsics,
    /// Height of the camera above the ground; the ground is the plane
    /// `y = camera_height`.
    pub camera_height: f64,
    pub image: Image,
    pub cloud: PointCloud,
    pub gt: Vec<Pedestrian>,
    pub occluders: Vec<Box3D>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarConfig {
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_step_deg: f64,
    pub range_noise: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beams: 64,
            elevation_min_deg: -24.8,
            elevation_max_deg: 2.0,
            azimuth_step_deg: 0.2,
            range_noise: 0.02,
            max_range: 80.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub camera: CameraIntrinsics,
    pub n_pedestrians: usize,
    pub depth_range: (f64, f64),
    pub occlusion_rate: f64,
    /// Ground-truth box height range, meters.
    pub height_range: (f64, f64),
    pub camera_height_range: (f64, f64),
    pub min_points: usize,
    /// Per-coordinate joint noise bound as a fraction of the body height.
    pub joint_noise: f64,
    pub max_yaw: f64,
    pub image_noise: f64,
    pub lidar: LidarConfig,
}

pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120).expect("valid default camera")
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            camera: default_camera(),
            n_pedestrians: 3,
            depth_range: (5.0, 50.0),
            occlusion_rate: 0.2,
            height_range: (1.5, 2.0),
            camera_height_range: (1.5, 1.7),
            min_points: 4,
            joint_noise: 0.02,
            max_yaw: 0.35,
            image_noise: 0.02,
            lidar: LidarConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && 0.0 < a && a <= b;
        if !ok(self.depth_range) || !ok(self.height_range) || !ok(self.camera_height_range) {
            return Err(Error::InvalidArgument("scene ranges must be positive and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::InvalidArgument("occlusion rate must lie in [0, 1]".into()));
        }
        if self.lidar.beams == 0 || !(self.lidar.azimuth_step_deg > 0.0) {
            return Err(Error::InvalidArgument("LiDAR needs beams and a positive azimuth step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Ground,
    Body(usize),
    Occluder,
}

struct BodyShape {
    capsules: Vec<(Capsule, usize)>,
}

// (joint a, joint b, radius per unit joint span, color slot)
const LIMBS: [(usize, usize, f64, usize); 10] = [
    (1, 3, 0.030, 1),
    (3, 5, 0.025, 1),
    (2, 4, 0.030, 1),
    (4, 6, 0.025, 1),
    (7, 9, 0.045, 2),
    (9, 11, 0.035, 2),
    (8, 10, 0.045, 2),
    (10, 12, 0.035, 2),
    (1, 2, 0.040, 1),
    (7, 8, 0.050, 2),
];

fn mid(a: Vec3, b: Vec3) -> Vec3 {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]
}

fn body_shape(pose: &Skeleton3D, span: f64) -> BodyShape {
    let j = &pose.joints;
    let neck = mid(j[1], j[2]);
    let pelvis = mid(j[7], j[8]);
    let mut capsules: Vec<(Capsule, usize)> = LIMBS
        .iter()
        .map(|&(a, b, r, slot)| {
            (
                Capsule {
                    a: j[a],
                    b: j[b],
                    radius: r * span,
                },
                slot,
            )
        })
        .collect();
    capsules.push((
        Capsule {
            a: neck,
            b: pelvis,
            radius: 0.08 * span,
        },
        1,
    ));
    capsules.push((
        Capsule {
            a: j[0],
            b: neck,
            radius: 0.03 * span,
        },
        0,
    ));
    capsules.push((
        Capsule {
            a: j[0],
            b: j[0],
            radius: 0.065 * span,
        },
        0,
    ));
    BodyShape { capsules }
}

struct World {
    ground: f64,
    bodies: Vec<BodyShape>,
    occluders: Vec<Box3D>,
}

impl World {
    fn cast(&self, o: Vec3, d: Vec3, inflate: Option<f64>) -> Option<(f64, Surface, usize)> {
        let mut best: Option<(f64, Surface, usize)> = ray_ground(o, d, self.ground).map(|t| (t, Surface::Ground, 0));
        let mut take = |t: f64, s: Surface, slot: usize| {
            if best.map_or(true, |(b, _, _)| t < b) {
                best = Some((t, s, slot));
            }
        };
        for b in &self.occluders {
            if let Some(t) = ray_box(o, d, b) {
                take(t, Surface::Occluder, 0);
            }
        }
        for (i, body) in self.bodies.iter().enumerate() {
            for (cap, slot) in &body.capsules {
                let cap = match inflate {
                    // keep thin limbs at least a fraction of a pixel wide
                    Some(px) => Capsule {
                        radius: cap.radius.max(px * 0.5 * (cap.a[2] + cap.b[2])),
                        ..*cap
                    },
                    None => *cap,
                };
                if let Some(t) = ray_capsule(o, d, &cap) {
                    take(t, Surface::Body(i), *slot);
                }
            }
        }
        best
    }

    fn blocked(&self, target: Vec3) -> bool {
        let dist = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = [target[0] / dist, target[1] / dist, target[2] / dist];
        self.occluders
            .iter()
            .any(|b| ray_box([0.0; 3], d, b).is_some_and(|t| t < dist))
    }
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn sample_pose(
    anchors: &AnchorPoseSet,
    cfg: &SceneConfig,
    ground: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Skeleton3D, f64)> {
    let k = rng.random_range(0..anchors.len());
    let shape = &anchors.get(k)?.shape;
    let height = rng.random_range(cfg.height_range.0..=cfg.height_range.1);
    let span = height - 2.0 * BODY_PADDING;
    let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
    let cam = &cfg.camera;
    let margin = 4.0;
    let u = rng.random_range(margin..cam.width as f64 - margin);
    let x = (u - cam.cx) * z / cam.fx;
    let yaw: f64 = rng.random_range(-cfg.max_yaw..=cfg.max_yaw);
    let (s, c) = yaw.sin_cos();
    let cy = ground - BODY_PADDING - 0.5 * span;
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    for (j, p) in shape.joints.iter().enumerate() {
        let mut n = [0.0; 3];
        for v in &mut n {
            *v = rng.random_range(-cfg.joint_noise..=cfg.joint_noise) * span;
        }
        let (lx, lz) = (p[0] * span + n[0], p[2] * span + n[2]);
        joints[j] = [x + c * lx + s * lz, cy + p[1] * span + n[1], z - s * lx + c * lz];
    }
    // feet stay on the ground whatever the noise did
    let lowest = joints.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    for p in &mut joints {
        p[1] += ground - BODY_PADDING - lowest;
    }
    Ok((Skeleton3D::new(joints), span))
}

fn ground_truth(cam: &CameraIntrinsics, pose: Skeleton3D) -> Result<Pedestrian> {
    let box_3d = pose.bounding_box().padded(BODY_PADDING);
    let pose_2d = project_skeleton(cam, &pose)?;
    let box_2d = project_box_section(cam, &box_3d)?;
    Ok(Pedestrian {
        pose_3d: pose,
        pose_2d,
        box_3d,
        box_2d,
    })
}

fn image_bounds(p: &Pedestrian) -> Box2D {
    let a = p.pose_2d.bounding_box();
    let b = p.box_2d;
    Box2D::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2))
}

fn overlaps(a: &Box2D, b: &Box2D) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn inside_image(cam: &CameraIntrinsics, b: &Box2D) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= cam.width as f64 && b.y2 <= cam.height as f64
}

/// Generate one scene. Pedestrians that cannot be placed without leaving the
/// image or overlapping another one, or that end up unoccluded with fewer than
/// `min_points` LiDAR returns, are dropped, so the scene may hold fewer than
/// `n_pedestrians`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    generate_scene_with(seed, cfg, &AnchorPoseSet::default())
}

pub fn generate_scene_with(seed: u64, cfg: &SceneConfig, anchors: &AnchorPoseSet) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = cfg.camera;
    let ground = rng.random_range(cfg.camera_height_range.0..=cfg.camera_height_range.1);

    let mut placed: Vec<(Pedestrian, f64, Box2D)> = Vec::new();
    for _ in 0..cfg.n_pedestrians {
        for _attempt in 0..50 {
            let (pose, span) = sample_pose(anchors, cfg, ground, &mut rng)?;
            let ped = ground_truth(&cam, pose)?;
            let bounds = image_bounds(&ped);
            if inside_image(&cam, &bounds) && placed.iter().all(|(_, _, b)| !overlaps(b, &bounds)) {
                placed.push((ped, span, bounds));
                break;
            }
        }
    }

    let mut occluders = Vec::new();
    for (ped, _, _) in &placed {
        if !rng.random_bool(cfg.occlusion_rate) {
            continue;
        }
        let c = ped.box_3d.center;
        let z = c[2] - rng.random_range(1.5..3.0);
        if z < 2.0 {
            continue;
        }
        let h = rng.random_range(0.7..1.2);
        let w = rng.random_range(0.6..1.5);
        let x = c[0] * z / c[2] + rng.random_range(-0.3..0.3);
        let candidate = Box3D::new([x, ground - 0.5 * h, z], [w, h, rng.random_range(0.3..1.0)]);
        let clear = placed.iter().all(|(p, _, _)| {
            let (a, b) = (p.box_3d.padded(0.2), candidate);
            let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
            (0..3).any(|i| ahi[i] < blo[i] || bhi[i] < alo[i])
        });
        if clear {
            occluders.push(candidate);
        }
    }

    let mut world = World {
        ground,
        bodies: placed.iter().map(|(p, span, _)| body_shape(&p.pose_3d, *span)).collect(),
        occluders,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_11da_b0a7_u64);
    let (mut cloud, counts) = simulate_lidar(&world, cfg, placed.len(), &mut noise_rng);
    let keep: Vec<bool> = placed
        .iter()
        .enumerate()
        .map(|(i, (p, _, _))| counts[i] >= cfg.min_points || p.pose_3d.joints.iter().any(|j| world.blocked(*j)))
        .collect();
    if keep.iter().any(|k| !k) {
        let mut i = 0;
        placed.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        world.bodies = placed.iter().map(|(p, span, _)| body_shape(&p.pose_3d, *span)).collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_11da_b0a7_u64);
        (cloud, _) = simulate_lidar(&world, cfg, placed.len(), &mut noise_rng);
    }

    let mut gt = Vec::with_capacity(placed.len());
    for (mut ped, _, _) in placed {
        for j in 0..NUM_JOINTS {
            let vis = !world.blocked(ped.pose_3d.joints[j]);
            ped.pose_3d.visible[j] = vis;
            ped.pose_2d.visible[j] = vis;
        }
        gt.push(ped);
    }
    let palette_rng = &mut rng;
    let image = render(&world, cfg, palette_rng, &mut noise_rng);
    Ok(Scene {
        id: seed,
        camera: cam,
        camera_height: ground,
        image,
        cloud,
        gt,
        occluders: world.occluders,
    })
}

fn simulate_lidar(world: &World, cfg: &SceneConfig, n_bodies: usize, rng: &mut ChaCha8Rng) -> (PointCloud, Vec<usize>) {
    let l = &cfg.lidar;
    let cam = &cfg.camera;
    let half_fov = (cam.cx / cam.fx).atan().max(((cam.width as f64 - cam.cx) / cam.fx).atan());
    let step = l.azimuth_step_deg.to_radians();
    let n_az = (2.0 * half_fov / step).floor() as usize + 1;
    let noise = Normal::new(0.0, l.range_noise.max(1e-12)).expect("finite noise");
    let mut counts = vec![0; n_bodies];
    let mut points = Vec::new();
    for beam in 0..l.beams {
        let el = if l.beams == 1 {
            l.elevation_max_deg
        } else {
            l.elevation_max_deg - (l.elevation_max_deg - l.elevation_min_deg) * beam as f64 / (l.beams - 1) as f64
        }
        .to_radians();
        for ia in 0..n_az {
            let az = -half_fov + ia as f64 * step;
            let d = [az.sin() * el.cos(), -el.sin(), az.cos() * el.cos()];
            let Some((t, surface, _)) = world.cast([0.0; 3], d, None) else { continue };
            if t > l.max_range {
                continue;
            }
            let t = t + noise.sample(rng);
            let p = point_at([0.0; 3], d, t);
            if p[2] <= 0.0 {
                continue;
            }
            let intensity: f64 = match surface {
                Surface::Ground => 0.15 + 0.1 * rng.random::<f64>(),
                Surface::Body(i) => {
                    counts[i] += 1;
                    0.45 + 0.2 * rng.random::<f64>()
                }
                Surface::Occluder => 0.75 + 0.2 * rng.random::<f64>(),
            };
            points.push(LidarPoint { position: p, intensity });
        }
    }
    (PointCloud::new(points), counts)
}

fn render(world: &World, cfg: &SceneConfig, palette: &mut ChaCha8Rng, noise_rng: &mut ChaCha8Rng) -> Image {
    let cam = &cfg.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut colors: Vec<[[f64; 3]; 3]> = Vec::with_capacity(world.bodies.len());
    for _ in &world.bodies {
        let skin = [0.85, 0.65, 0.5];
        let shirt = [palette.random(), palette.random(), palette.random()];
        let pants = [0.3 * palette.random::<f64>(), 0.3 * palette.random::<f64>(), 0.5 * palette.random::<f64>()];
        colors.push([skin, shirt, pants]);
    }
    let noise = Normal::new(0.0, cfg.image_noise.max(1e-12)).expect("finite noise");
    let min_radius = 0.6 / cam.fx;
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = normalize([(x as f64 + 0.5 - cam.cx) / cam.fx, (y as f64 + 0.5 - cam.cy) / cam.fy, 1.0]);
            let rgb = match world.cast([0.0; 3], d, Some(min_radius)) {
                None => {
                    let t = (y as f64 / h as f64).min(1.0);
                    [0.55 + 0.1 * t, 0.7 + 0.05 * t, 0.9]
                }
                Some((t, Surface::Ground, _)) => {
                    let shade = (1.0 - t / 200.0).max(0.6);
                    [0.35 * shade, 0.33 * shade, 0.3 * shade]
                }
                Some((_, Surface::Occluder, _)) => [0.55, 0.2, 0.18],
                Some((_, Surface::Body(i), slot)) => colors[i][slot],
            };
            for (c, v) in rgb.iter().enumerate() {
                img.data[(c * h + y) * w + x] = (v + noise.sample(noise_rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Left/right mirror of a scene about the principal point, with joint
/// labels swapped so the left wrist stays a left wrist.
pub fn flip_scene(scene: &Scene, order: &JointOrder) -> Result<Scene> {
    let cam = scene.camera;
    let w = cam.width as f64;
    let mut gt = Vec::with_capacity(scene.gt.len());
    for p in &scene.gt {
        let box_3d = p.box_3d.flipped_x();
        gt.push(Pedestrian {
            pose_3d: flip_pose_3d(&p.pose_3d, Some(order)),
            pose_2d: flip_pose_2d(&p.pose_2d, w, Some(order)),
            box_3d,
            box_2d: Box2D::new(w - p.box_2d.x2, p.box_2d.y1, w - p.box_2d.x1, p.box_2d.y2),
        });
    }
    Ok(Scene {
        id: scene.id,
        camera: cam,
        camera_height: scene.camera_height,
        image: scene.image.mirrored(),
        cloud: flip_cloud(&scene.cloud),
        gt,
        occluders: scene.occluders.iter().map(Box3D::flipped_x).collect(),
    })
}

/// Number of LiDAR returns inside each pedestrian's box.
pub fn points_per_pedestrian(scene: &Scene) -> Vec<usize> {
    scene
        .gt
        .iter()
        .map(|p| scene.cloud.points.iter().filter(|q| p.box_3d.contains(q.position)).count())
        .collect()
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_ground_only() {
        let cfg = SceneConfig {
            n_pedestrians: 0,
            ..Default::default()
        };
        let s = generate_scene(7, &cfg).unwrap();
        assert!(s.gt.is_empty() && s.occluders.is_empty());
        assert!(!s.cloud.is_empty());
        for p in &s.cloud.points {
            assert!((p.position[1] - s.camera_height).abs() < 0.2);
        }
    }

    #[test]
    fn labels_match_projection_bitwise() {
        let s = generate_scene(11, &SceneConfig::default()).unwrap();
        assert!(!s.gt.is_empty());
        for p in &s.gt {
            assert_eq!(project_skeleton(&s.camera, &p.pose_3d).unwrap(), p.pose_2d);
            assert!(p.pose_3d.joints.iter().all(|j| p.box_3d.contains(*j)));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(3, &cfg).unwrap(), generate_scene(3, &cfg).unwrap());
        assert_ne!(generate_scene(3, &cfg).unwrap().cloud, generate_scene(4, &cfg).unwrap().cloud);
    }

    #[test]
    fn flipped_scene_stays_consistent() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let f = flip_scene(&s, &JointOrder::default()).unwrap();
        for p in &f.gt {
            let proj = project_skeleton(&f.camera, &p.pose_3d).unwrap();
            for j in 0..NUM_JOINTS {
                for a in 0..2 {
                    assert!((proj.joints[j][a] - p.pose_2d.joints[j][a]).abs() < 1e-9);
                }
            }
            let b = project_box_section(&f.camera, &p.box_3d).unwrap();
            assert!((b.x1 - p.box_2d.x1).abs() < 1e-9 && (b.x2 - p.box_2d.x2).abs() < 1e-9);
        }
        let back = flip_scene(&f, &JointOrder::default()).unwrap();
        assert_eq!((&back.cloud, &back.image, &back.occluders), (&s.cloud, &s.image, &s.occluders));
        for (a, b) in back.gt.iter().zip(&s.gt) {
            assert_eq!((a.pose_3d, a.box_3d), (b.pose_3d, b.box_3d));
            // w - (w - u) rounds back to u only up to one ulp of w
            for j in 0..NUM_JOINTS {
                assert!((a.pose_2d.joints[j][0] - b.pose_2d.joints[j][0]).abs() < 1e-12);
            }
        }
    }
}
