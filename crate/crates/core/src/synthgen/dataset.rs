//! On-disk dataset: a key-value manifest, one checksummed binary blob per
//! scene and one label file per scene in the prediction-record format.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/scenes/scene_00000.bin
//! <dir>/labels/scene_00000.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{generate_scene, scene_seed, Image, Pedestrian, Scene, SceneConfig};
use crate::anchors::{extents_from_locations, ANCHOR_STRIDE};
use crate::bev::AreaExtents;
use crate::config::{format_list, parse_list, KvMap};
use crate::error::{Error, Result};
use crate::evalkit::{format_pose_record, pose_record_header};
use crate::geometry::{
    Box2D, Box3D, CameraIntrinsics, JointOrder, LidarPoint, PointCloud, Skeleton2D, Skeleton3D, NUM_JOINTS,
};

pub const SCENE_FORMAT_VERSION: u32 = 1;
const SCENE_MAGIC: &[u8; 8] = b"HPRLSCN\0";
const HEADER_LEN: usize = 8 + 4 + 8 + 4;

/// BEV height slab relative to the fitted ground, meters (y down): from
/// 2.5 m above the ground to 0.1 m above it.
pub const DEFAULT_SLAB: (f64, f64) = (-2.5, -0.1);

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub pedestrians: (usize, usize),
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            seed: 0,
            train_fraction: 0.8,
            pedestrians: (1, 4),
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene_count: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub joint_order: JointOrder,
    /// Lateral and depth extents are absolute; `y_min`/`y_max` are the slab
    /// relative to the ground height of each scene.
    pub extents: AreaExtents,
}

impl DatasetManifest {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("format_version", self.format_version);
        m.set("scene_count", self.scene_count);
        m.set("seed", self.seed);
        m.set("split.train", format_list(&self.train));
        m.set("split.eval", format_list(&self.eval));
        m.set("joint_order", self.joint_order.names().join(","));
        let e = &self.extents;
        for (k, v) in [
            ("x_min", e.x_min),
            ("x_max", e.x_max),
            ("y_min", e.y_min),
            ("y_max", e.y_max),
            ("z_min", e.z_min),
            ("z_max", e.z_max),
        ] {
            m.set(&format!("extents.{k}"), v);
        }
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let names: Vec<String> = parse_list("joint_order", m.get_str("joint_order").unwrap_or(""))?;
        let manifest = Self {
            format_version: m.require("format_version")?,
            scene_count: m.require("scene_count")?,
            seed: m.require("seed")?,
            train: parse_list("split.train", m.get_str("split.train").unwrap_or(""))?,
            eval: parse_list("split.eval", m.get_str("split.eval").unwrap_or(""))?,
            joint_order: JointOrder::new(names)?,
            extents: AreaExtents {
                x_min: m.require("extents.x_min")?,
                x_max: m.require("extents.x_max")?,
                y_min: m.require("extents.y_min")?,
                y_max: m.require("extents.y_max")?,
                z_min: m.require("extents.z_min")?,
                z_max: m.require("extents.z_max")?,
            },
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.scene_count];
        for &i in self.train.iter().chain(&self.eval) {
            if i >= self.scene_count || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("split index {i} is out of range or listed twice")));
            }
        }
        self.extents.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, indices: &[usize]) -> Vec<&Scene> {
        indices.iter().map(|&i| &self.scenes[i]).collect()
    }
}

fn fallback_extents(cfg: &SceneConfig) -> AreaExtents {
    let (near, far) = cfg.depth_range;
    let lateral = far * (cfg.camera.width as f64 - cfg.camera.cx).max(cfg.camera.cx) / cfg.camera.fx;
    AreaExtents {
        x_min: -lateral,
        x_max: lateral,
        y_min: DEFAULT_SLAB.0,
        y_max: DEFAULT_SLAB.1,
        z_min: near,
        z_max: far,
    }
}

/// Generate all scenes (in parallel, each from its own derived seed) and the
/// manifest, with area extents taken from the training ground truth.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.scene.validate()?;
    if cfg.pedestrians.0 > cfg.pedestrians.1 || !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::InvalidArgument("invalid pedestrian range or train fraction".into()));
    }
    let scenes: Vec<Scene> = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(cfg.seed, i);
            let span = (cfg.pedestrians.1 - cfg.pedestrians.0 + 1) as u64;
            let scene_cfg = SceneConfig {
                n_pedestrians: cfg.pedestrians.0 + (seed % span) as usize,
                ..cfg.scene.clone()
            };
            generate_scene(seed, &scene_cfg)
        })
        .collect::<Result<_>>()?;
    let n_train = (cfg.scenes as f64 * cfg.train_fraction).round() as usize;
    let train: Vec<usize> = (0..n_train).collect();
    let eval: Vec<usize> = (n_train..cfg.scenes).collect();
    let centers: Vec<_> = train
        .iter()
        .flat_map(|&i| scenes[i].gt.iter().map(|p| p.box_3d.center))
        .collect();
    let extents = if centers.is_empty() {
        fallback_extents(&cfg.scene)
    } else {
        extents_from_locations(&centers, ANCHOR_STRIDE, DEFAULT_SLAB)?
    };
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: SCENE_FORMAT_VERSION,
            scene_count: cfg.scenes,
            seed: cfg.seed,
            train,
            eval,
            joint_order: JointOrder::default(),
            extents,
        },
        scenes,
    })
}

fn scene_file(dir: &Path, i: usize) -> PathBuf {
    dir.join("scenes").join(format!("scene_{i:05}.bin"))
}

fn label_file(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("scene_{i:05}.csv"))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    if dataset.scenes.len() != dataset.manifest.scene_count {
        return Err(Error::InvalidArgument("manifest scene count differs from the scenes".into()));
    }
    for sub in ["scenes", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, scene) in dataset.scenes.iter().enumerate() {
        write_scene(scene, &scene_file(dir, i))?;
        let mut text = pose_record_header();
        for p in &scene.gt {
            text.push_str(&format_pose_record(scene.id, 1.0, &p.pose_2d, &p.pose_3d));
        }
        let path = label_file(dir, i);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    // manifest last: its presence marks a complete dataset
    dataset.manifest.to_kv().save(&dir.join("manifest.txt"))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::from_kv(&KvMap::load(&dir.join("manifest.txt"))?)?;
    if manifest.format_version != SCENE_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: dir.join("manifest.txt"),
            found: manifest.format_version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let scenes = (0..manifest.scene_count)
        .map(|i| read_scene(&scene_file(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, scenes })
}

struct Writer(Vec<u8>);

impl Writer {
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bools(&mut self, v: &[bool]) {
        self.0.extend(v.iter().map(|b| u8::from(*b)));
    }
    fn box3(&mut self, b: &Box3D) {
        b.center.iter().chain(&b.size).for_each(|v| self.f64(*v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "payload ends early"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::format(self.path, "implausible element count"));
        }
        Ok(n)
    }
    fn bools<const N: usize>(&mut self) -> Result<[bool; N]> {
        let s = self.take(N)?;
        let mut out = [false; N];
        for (o, b) in out.iter_mut().zip(s) {
            *o = match b {
                0 => false,
                1 => true,
                _ => return Err(Error::format(self.path, "invalid flag byte")),
            };
        }
        Ok(out)
    }
    fn box3(&mut self) -> Result<Box3D> {
        let c = [self.f64()?, self.f64()?, self.f64()?];
        let s = [self.f64()?, self.f64()?, self.f64()?];
        Ok(Box3D::new(c, s))
    }
}

fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(scene.id);
    let c = &scene.camera;
    for v in [c.fx, c.fy, c.cx, c.cy] {
        w.f64(v);
    }
    w.u32(c.width);
    w.u32(c.height);
    w.f64(scene.camera_height);
    w.u64(scene.image.width as u64);
    w.u64(scene.image.height as u64);
    scene.image.data.iter().for_each(|v| w.f64(*v));
    w.u64(scene.cloud.points.len() as u64);
    for p in &scene.cloud.points {
        p.position.iter().for_each(|v| w.f64(*v));
        w.f64(p.intensity);
    }
    w.u64(scene.gt.len() as u64);
    for p in &scene.gt {
        p.pose_3d.joints.iter().flatten().for_each(|v| w.f64(*v));
        w.bools(&p.pose_3d.visible);
        p.pose_2d.joints.iter().flatten().for_each(|v| w.f64(*v));
        w.bools(&p.pose_2d.visible);
        w.box3(&p.box_3d);
        for v in [p.box_2d.x1, p.box_2d.y1, p.box_2d.x2, p.box_2d.y2] {
            w.f64(v);
        }
    }
    w.u64(scene.occluders.len() as u64);
    scene.occluders.iter().for_each(|b| w.box3(b));
    w.0
}

fn decode_scene(payload: &[u8], path: &Path) -> Result<Scene> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
        path,
    };
    let id = r.u64()?;
    let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let camera = CameraIntrinsics::new(fx, fy, cx, cy, r.u32()?, r.u32()?)?;
    let camera_height = r.f64()?;
    let (width, height) = (r.len()?, r.len()?);
    let n = 3 * width * height;
    if n * 8 > payload.len() {
        return Err(Error::format(path, "image larger than payload"));
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    let image = Image { width, height, data };
    let n_points = r.len()?;
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let position = [r.f64()?, r.f64()?, r.f64()?];
        points.push(LidarPoint {
            position,
            intensity: r.f64()?,
        });
    }
    let n_gt = r.len()?;
    let mut gt = Vec::with_capacity(n_gt);
    for _ in 0..n_gt {
        let mut j3 = [[0.0; 3]; NUM_JOINTS];
        for j in &mut j3 {
            *j = [r.f64()?, r.f64()?, r.f64()?];
        }
        let v3 = r.bools::<NUM_JOINTS>()?;
        let mut j2 = [[0.0; 2]; NUM_JOINTS];
        for j in &mut j2 {
            *j = [r.f64()?, r.f64()?];
        }
        let v2 = r.bools::<NUM_JOINTS>()?;
        let box_3d = r.box3()?;
        let box_2d = Box2D::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        gt.push(Pedestrian {
            pose_3d: Skeleton3D {
                joints: j3,
                visible: v3,
            },
            pose_2d: Skeleton2D {
                joints: j2,
                visible: v2,
            },
            box_3d,
            box_2d,
        });
    }
    let n_occ = r.len()?;
    let occluders = (0..n_occ).map(|_| r.box3()).collect::<Result<_>>()?;
    if r.pos != payload.len() {
        return Err(Error::format(path, "trailing bytes after scene"));
    }
    Ok(Scene {
        id,
        camera,
        camera_height,
        image,
        cloud: PointCloud::new(points),
        gt,
        occluders,
    })
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    let payload = encode_scene(scene);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.into() });
    }
    if &buf[..8] != SCENE_MAGIC {
        return Err(Error::format(path, "not a scene file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != SCENE_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(buf[20..24].try_into().unwrap());
    let payload = &buf[HEADER_LEN..];
    if payload.len() < len {
        return Err(Error::Truncated { path: path.into() });
    }
    if payload.len() > len {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::Checksum { path: path.into() });
    }
    decode_scene(payload, path)
}
