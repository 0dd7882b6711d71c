//! The two-stage detector.
//!
//! Stage 1 scores anchors: in LiDAR mode the non-empty 3D anchors, cropped
//! from both feature maps, reduced to one channel per view and averaged; in
//! RGB mode a dense convolutional head over image anchors. Stage 2 crops every
//! proposal from each stream, fuses the crops and predicts `K + 1` class
//! logits plus `5·J·(K + 1)` pose deltas.

use std::path::PathBuf;

use super::graph::{Graph, NodeId};
use super::input::{decode_box2d, decode_box3d, image_roi_to_3d, SceneInput, BEV_STRIDE, IMAGE_ANCHOR_HEIGHTS, IMAGE_STRIDE};
use super::optim::OptimizerKind;
use super::params::{init_rng, Init, ParamId, ParamStore};
use super::roi::{FusionMode, RoiOp};
use super::tensor::Tensor;
use crate::anchors::{fit_anchor_pose_3d, fit_anchor_pose_to_roi, AnchorPoseSet, ANCHOR_STRIDE, NUM_ANCHOR_POSES, PEDESTRIAN_TEMPLATE};
use crate::assignment::{iou_2d, iou_footprint};
use crate::bev::{project_box_to_bev, BEV_CHANNELS};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::evalkit::{integrate_proposals, FinalPose, PoseProposal};
use crate::geometry::{project_box_section, Box2D, Box3D, Skeleton2D, Skeleton3D, Vec3, NUM_JOINTS};
use crate::losses::{sigmoid, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputMode {
    Rgb,
    #[default]
    Fusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: InputMode,
    pub fusion: FusionMode,
    pub roi_op: RoiOp,
    pub channels: usize,
    pub groups: usize,
    pub num_anchor_poses: usize,
    pub num_joints: usize,
    /// Optional anchor-pose file replacing the bundled set.
    pub anchor_poses: Option<PathBuf>,
    pub rpn_hidden: usize,
    pub fc_hidden: usize,
    pub stage1_crop: usize,
    pub stage2_crop: usize,
    pub top_n: usize,
    pub nms_iou: f64,
    pub rpn_batch: usize,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub foreground_iou: f64,
    pub smooth_l1_beta: f64,
    pub rpn_beta: f64,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub flip: bool,
    pub seed: u64,
    pub bev_resolution: f64,
    pub anchor_stride: f64,
    pub ransac_offset: f64,
    /// Anchor box size `(w, h, l)`; the height also backprojects image boxes
    /// in RGB mode.
    pub template: Vec3,
    pub integration_iou: f64,
    pub score_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: InputMode::Fusion,
            fusion: FusionMode::Concat,
            roi_op: RoiOp::Align,
            channels: 32,
            groups: 4,
            num_anchor_poses: NUM_ANCHOR_POSES,
            num_joints: NUM_JOINTS,
            anchor_poses: None,
            rpn_hidden: 32,
            fc_hidden: 64,
            stage1_crop: 3,
            stage2_crop: 4,
            top_n: 32,
            nms_iou: 0.7,
            rpn_batch: 64,
            rpn_positive_iou: 0.5,
            rpn_negative_iou: 0.3,
            foreground_iou: crate::assignment::FOREGROUND_IOU,
            smooth_l1_beta: 1.0,
            rpn_beta: 1.0 / 9.0,
            weights: LossWeights::default(),
            learning_rate: 5e-5,
            optimizer: OptimizerKind::Adam,
            epochs: 50,
            batch_size: 1,
            lr_decay: 1.0,
            lr_decay_every: 0,
            flip: true,
            seed: 0,
            bev_resolution: 0.2,
            anchor_stride: ANCHOR_STRIDE,
            ransac_offset: 0.0,
            template: PEDESTRIAN_TEMPLATE,
            integration_iou: crate::evalkit::INTEGRATION_IOU,
            score_floor: crate::evalkit::SCORE_FLOOR,
        }
    }
}

fn parse_enum<T>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    options
        .iter()
        .find(|(n, _)| *n == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Config(format!("invalid value {value:?} for {key}")))
}

const MODES: [(&str, InputMode); 2] = [("rgb", InputMode::Rgb), ("fusion", InputMode::Fusion)];
const FUSIONS: [(&str, FusionMode); 2] = [("concat", FusionMode::Concat), ("mean", FusionMode::Mean)];
const ROI_OPS: [(&str, RoiOp); 2] = [("align", RoiOp::Align), ("pool", RoiOp::Pool)];
const OPTIMIZERS: [(&str, OptimizerKind); 2] = [("adam", OptimizerKind::Adam), ("rmsprop", OptimizerKind::RmsProp)];

fn enum_name<T: PartialEq + Copy>(v: T, options: &[(&'static str, T)]) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).unwrap_or("?")
}

impl ModelConfig {
    /// The RGB-only baseline recipe: RMSProp, batch 4, lr 1e-3 decayed by
    /// 0.8 every 50 epochs, 170 epochs.
    pub fn rgb_baseline() -> Self {
        Self {
            mode: InputMode::Rgb,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::RmsProp,
            epochs: 170,
            batch_size: 4,
            lr_decay: 0.8,
            lr_decay_every: 50,
            ..Self::default()
        }
    }

    /// Small and fast settings for single-CPU experiments.
    pub fn desk(mode: InputMode) -> Self {
        Self {
            mode,
            channels: 16,
            learning_rate: 2e-3,
            epochs: 6,
            lr_decay: 0.5,
            lr_decay_every: 2,
            flip: false,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fusion" => Ok(Self::default()),
            "rgb" => Ok(Self::rgb_baseline()),
            "desk-fusion" => Ok(Self::desk(InputMode::Fusion)),
            "desk-rgb" => Ok(Self::desk(InputMode::Rgb)),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_joints != NUM_JOINTS {
            return err("num_joints must be 13");
        }
        if self.num_anchor_poses == 0 {
            return err("num_anchor_poses must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return err("learning_rate must be positive");
        }
        if self.channels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return err("channels must be a positive multiple of groups");
        }
        if self.batch_size == 0 || self.top_n == 0 || self.stage1_crop == 0 || self.stage2_crop == 0 {
            return err("batch_size, top_n and crop sizes must be positive");
        }
        if self.rpn_hidden == 0 || self.fc_hidden == 0 {
            return err("hidden sizes must be positive");
        }
        if !(self.bev_resolution > 0.0 && self.anchor_stride > 0.0 && self.smooth_l1_beta > 0.0 && self.rpn_beta > 0.0)
        {
            return err("resolution, stride and smooth-L1 betas must be positive");
        }
        if self.template.iter().any(|v| !(*v > 0.0)) {
            return err("template sizes must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("mode", enum_name(self.mode, &MODES));
        m.set("fusion", enum_name(self.fusion, &FUSIONS));
        m.set("roi_op", enum_name(self.roi_op, &ROI_OPS));
        m.set("optimizer", enum_name(self.optimizer, &OPTIMIZERS));
        m.set("channels", self.channels);
        m.set("groups", self.groups);
        m.set("num_anchor_poses", self.num_anchor_poses);
        m.set("num_joints", self.num_joints);
        if let Some(p) = &self.anchor_poses {
            m.set("anchor_poses", p.display());
        }
        m.set("rpn_hidden", self.rpn_hidden);
        m.set("fc_hidden", self.fc_hidden);
        m.set("stage1_crop", self.stage1_crop);
        m.set("stage2_crop", self.stage2_crop);
        m.set("top_n", self.top_n);
        m.set("nms_iou", self.nms_iou);
        m.set("rpn_batch", self.rpn_batch);
        m.set("rpn_positive_iou", self.rpn_positive_iou);
        m.set("rpn_negative_iou", self.rpn_negative_iou);
        m.set("foreground_iou", self.foreground_iou);
        m.set("smooth_l1_beta", self.smooth_l1_beta);
        m.set("rpn_beta", self.rpn_beta);
        m.set("weight.rpn_obj", self.weights.rpn_obj);
        m.set("weight.rpn_reg", self.weights.rpn_reg);
        m.set("weight.cls", self.weights.cls);
        m.set("weight.pose_2d", self.weights.pose_2d);
        m.set("weight.pose_3d", self.weights.pose_3d);
        m.set("learning_rate", self.learning_rate);
        m.set("epochs", self.epochs);
        m.set("batch_size", self.batch_size);
        m.set("lr_decay", self.lr_decay);
        m.set("lr_decay_every", self.lr_decay_every);
        m.set("flip", self.flip);
        m.set("seed", self.seed);
        m.set("bev_resolution", self.bev_resolution);
        m.set("anchor_stride", self.anchor_stride);
        m.set("ransac_offset", self.ransac_offset);
        m.set("template.w", self.template[0]);
        m.set("template.h", self.template[1]);
        m.set("template.l", self.template[2]);
        m.set("integration_iou", self.integration_iou);
        m.set("score_floor", self.score_floor);
        m
    }

    /// Start from the `preset` key (default `fusion`) and apply every other
    /// recognized key.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let mut c = Self::preset(m.get_str("preset").unwrap_or("fusion"))?;
        if let Some(v) = m.get_str("mode") {
            c.mode = parse_enum("mode", v, &MODES)?;
        }
        if let Some(v) = m.get_str("fusion") {
            c.fusion = parse_enum("fusion", v, &FUSIONS)?;
        }
        if let Some(v) = m.get_str("roi_op") {
            c.roi_op = parse_enum("roi_op", v, &ROI_OPS)?;
        }
        if let Some(v) = m.get_str("optimizer") {
            c.optimizer = parse_enum("optimizer", v, &OPTIMIZERS)?;
        }
        if let Some(v) = m.get_str("anchor_poses") {
            c.anchor_poses = Some(PathBuf::from(v));
        }
        m.read_into("channels", &mut c.channels)?;
        m.read_into("groups", &mut c.groups)?;
        m.read_into("num_anchor_poses", &mut c.num_anchor_poses)?;
        m.read_into("num_joints", &mut c.num_joints)?;
        m.read_into("rpn_hidden", &mut c.rpn_hidden)?;
        m.read_into("fc_hidden", &mut c.fc_hidden)?;
        m.read_into("stage1_crop", &mut c.stage1_crop)?;
        m.read_into("stage2_crop", &mut c.stage2_crop)?;
        m.read_into("top_n", &mut c.top_n)?;
        m.read_into("nms_iou", &mut c.nms_iou)?;
        m.read_into("rpn_batch", &mut c.rpn_batch)?;
        m.read_into("rpn_positive_iou", &mut c.rpn_positive_iou)?;
        m.read_into("rpn_negative_iou", &mut c.rpn_negative_iou)?;
        m.read_into("foreground_iou", &mut c.foreground_iou)?;
        m.read_into("smooth_l1_beta", &mut c.smooth_l1_beta)?;
        m.read_into("rpn_beta", &mut c.rpn_beta)?;
        m.read_into("weight.rpn_obj", &mut c.weights.rpn_obj)?;
        m.read_into("weight.rpn_reg", &mut c.weights.rpn_reg)?;
        m.read_into("weight.cls", &mut c.weights.cls)?;
        m.read_into("weight.pose_2d", &mut c.weights.pose_2d)?;
        m.read_into("weight.pose_3d", &mut c.weights.pose_3d)?;
        m.read_into("learning_rate", &mut c.learning_rate)?;
        m.read_into("epochs", &mut c.epochs)?;
        m.read_into("batch_size", &mut c.batch_size)?;
        m.read_into("lr_decay", &mut c.lr_decay)?;
        m.read_into("lr_decay_every", &mut c.lr_decay_every)?;
        m.read_into("flip", &mut c.flip)?;
        m.read_into("seed", &mut c.seed)?;
        m.read_into("bev_resolution", &mut c.bev_resolution)?;
        m.read_into("anchor_stride", &mut c.anchor_stride)?;
        m.read_into("ransac_offset", &mut c.ransac_offset)?;
        m.read_into("template.w", &mut c.template[0])?;
        m.read_into("template.h", &mut c.template[1])?;
        m.read_into("template.l", &mut c.template[2])?;
        m.read_into("integration_iou", &mut c.integration_iou)?;
        m.read_into("score_floor", &mut c.score_floor)?;
        c.validate()?;
        Ok(c)
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
        }
    }

    pub fn num_deltas(&self) -> usize {
        5 * self.num_joints * (self.num_anchor_poses + 1)
    }
}

/// A stage-2 region: its image box and the 3D box it stands for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub box_2d: Box2D,
    pub box_3d: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub roi: Roi,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub roi: Roi,
    /// `K + 1` class logits, background first.
    pub logits: Vec<f64>,
    /// `5·J·(K + 1)` pose deltas: per class, `2J` image deltas (box-normalized)
    /// followed by `3J` metric deltas.
    pub deltas: Vec<f64>,
    /// Decoded poses of every foreground class `1..=K`.
    pub poses: Vec<(Skeleton2D, Skeleton3D)>,
}

impl Detection {
    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// Best foreground class (1-based) and its probability.
    pub fn best_class(&self) -> (usize, f64) {
        let p = self.probabilities();
        let mut best = (1, p[1]);
        for (c, v) in p.iter().enumerate().skip(2) {
            if *v > best.1 {
                best = (c, *v);
            }
        }
        best
    }

    pub fn to_proposal(&self) -> PoseProposal {
        let (c, score) = self.best_class();
        let (p2, p3) = self.poses[c - 1];
        PoseProposal {
            box_2d: self.roi.box_2d,
            score,
            pose_2d: p2,
            pose_3d: p3,
        }
    }
}

/// Decode the poses of foreground class `class` (1-based) from its block of
/// deltas: anchor pose `class − 1` fitted into the RoI plus the deltas.
pub fn decode_poses(
    deltas: &[f64],
    class: usize,
    anchors: &AnchorPoseSet,
    roi: &Roi,
) -> Result<(Skeleton2D, Skeleton3D)> {
    let j = NUM_JOINTS;
    let block = &deltas[class * 5 * j..(class + 1) * 5 * j];
    let mut p2 = fit_anchor_pose_to_roi(anchors, class - 1, &roi.box_2d)?;
    let (w, h) = (roi.box_2d.width(), roi.box_2d.height());
    for (i, joint) in p2.joints.iter_mut().enumerate() {
        joint[0] += block[2 * i] * w;
        joint[1] += block[2 * i + 1] * h;
    }
    let mut p3 = fit_anchor_pose_3d(anchors, class - 1, &roi.box_3d)?;
    for (i, joint) in p3.joints.iter_mut().enumerate() {
        for a in 0..3 {
            joint[a] += block[2 * j + 3 * i + a];
        }
    }
    Ok((p2, p3))
}

/// Image deltas that turn anchor pose `class − 1` fitted into `roi` into
/// `target`.
pub fn encode_pose_2d(target: &Skeleton2D, class: usize, anchors: &AnchorPoseSet, roi: &Box2D) -> Result<Vec<f64>> {
    let fitted = fit_anchor_pose_to_roi(anchors, class - 1, roi)?;
    let mut out = Vec::with_capacity(2 * NUM_JOINTS);
    for (t, f) in target.joints.iter().zip(&fitted.joints) {
        out.push((t[0] - f[0]) / roi.width());
        out.push((t[1] - f[1]) / roi.height());
    }
    Ok(out)
}

pub fn encode_pose_3d(target: &Skeleton3D, class: usize, anchors: &AnchorPoseSet, roi: &Box3D) -> Result<Vec<f64>> {
    let fitted = fit_anchor_pose_3d(anchors, class - 1, roi)?;
    Ok(target
        .joints
        .iter()
        .zip(&fitted.joints)
        .flat_map(|(t, f)| [t[0] - f[0], t[1] - f[1], t[2] - f[2]])
        .collect())
}

/// Greedy non-maximum suppression; returns kept indices by descending score.
pub fn nms(scores: &[f64], overlap: impl Fn(usize, usize) -> f64, threshold: f64, top_n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= top_n {
            break;
        }
        if keep.iter().all(|&k| overlap(k, i) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Node ids and raw outputs of one forward pass.
#[derive(Debug)]
pub struct Pass {
    pub graph: Graph,
    /// Stage-1 head output: `[A, 7]` in LiDAR mode, `[5·S, h, w]` in RGB mode.
    pub stage1: Option<NodeId>,
    pub objectness: Vec<f64>,
    /// Row-major `[anchor][delta]`.
    pub rpn_deltas: Vec<f64>,
    pub proposals: Vec<Proposal>,
    /// Stage-2 regions: proposals followed by any extra regions.
    pub rois: Vec<Roi>,
    pub cls: Option<NodeId>,
    pub deltas: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub anchors: AnchorPoseSet,
}

struct Block<'a> {
    name: &'a str,
    stride: usize,
}

const IMAGE_BLOCKS: [Block<'static>; 3] = [
    Block {
        name: "img.conv1",
        stride: 2,
    },
    Block {
        name: "img.conv2",
        stride: 2,
    },
    Block {
        name: "img.conv3",
        stride: 1,
    },
];
const BEV_BLOCKS: [Block<'static>; 3] = [
    Block {
        name: "bev.conv1",
        stride: 2,
    },
    Block {
        name: "bev.conv2",
        stride: 1,
    },
    Block {
        name: "bev.conv3",
        stride: 1,
    },
];

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let anchors = match &config.anchor_poses {
            Some(p) => AnchorPoseSet::load(p, config.num_anchor_poses)?,
            None if config.num_anchor_poses == NUM_ANCHOR_POSES => AnchorPoseSet::default(),
            None => {
                return Err(Error::Config(format!(
                    "{} anchor poses requested but only the bundled set of {NUM_ANCHOR_POSES} is available",
                    config.num_anchor_poses
                )))
            }
        };
        let mut rng = init_rng(config.seed);
        let mut p = ParamStore::new();
        let c = config.channels;
        let conv = |p: &mut ParamStore, rng: &mut _, name: &str, cin: usize, k: usize| {
            p.add(&format!("{name}.w"), vec![c, cin, k, k], Init::He, rng);
            p.add(&format!("{name}.b"), vec![c], Init::Zeros, rng);
        };
        let gn = |p: &mut ParamStore, rng: &mut _, name: &str| {
            p.add(&format!("{name}.gamma"), vec![c], Init::Ones, rng);
            p.add(&format!("{name}.beta"), vec![c], Init::Zeros, rng);
        };
        for (i, b) in IMAGE_BLOCKS.iter().enumerate() {
            conv(&mut p, &mut rng, b.name, if i == 0 { 3 } else { c }, 3);
            gn(&mut p, &mut rng, b.name);
        }
        let k1 = config.num_anchor_poses + 1;
        let s2 = config.stage2_crop * config.stage2_crop;
        let fused = match config.mode {
            InputMode::Fusion => {
                for (i, b) in BEV_BLOCKS.iter().enumerate() {
                    conv(&mut p, &mut rng, b.name, if i == 0 { BEV_CHANNELS } else { c }, 3);
                    gn(&mut p, &mut rng, b.name);
                }
                let s1 = config.stage1_crop * config.stage1_crop;
                for view in ["rpn.img_reduce", "rpn.bev_reduce"] {
                    p.add(&format!("{view}.w"), vec![1, c], Init::He, &mut rng);
                    p.add(&format!("{view}.b"), vec![1], Init::Zeros, &mut rng);
                }
                p.add("rpn.fc1.w", vec![config.rpn_hidden, s1], Init::He, &mut rng);
                p.add("rpn.fc1.b", vec![config.rpn_hidden], Init::Zeros, &mut rng);
                p.add("rpn.fc2.w", vec![7, config.rpn_hidden], Init::Normal(0.01), &mut rng);
                p.add("rpn.fc2.b", vec![7], Init::Zeros, &mut rng);
                match config.fusion {
                    FusionMode::Concat => 2 * c * s2,
                    FusionMode::Mean => c * s2,
                }
            }
            InputMode::Rgb => {
                conv(&mut p, &mut rng, "rpn.conv", c, 3);
                let n = 5 * IMAGE_ANCHOR_HEIGHTS.len();
                p.add("rpn.out.w", vec![n, c, 1, 1], Init::Normal(0.01), &mut rng);
                p.add("rpn.out.b", vec![n], Init::Zeros, &mut rng);
                c * s2
            }
        };
        p.add("head.fc.w", vec![config.fc_hidden, fused], Init::He, &mut rng);
        p.add("head.fc.b", vec![config.fc_hidden], Init::Zeros, &mut rng);
        p.add("head.cls.w", vec![k1, config.fc_hidden], Init::Normal(0.01), &mut rng);
        p.add("head.cls.b", vec![k1], Init::Zeros, &mut rng);
        p.add("head.reg.w", vec![config.num_deltas(), config.fc_hidden], Init::Normal(0.001), &mut rng);
        p.add("head.reg.b", vec![config.num_deltas()], Init::Zeros, &mut rng);
        Ok(Self {
            config,
            params: p,
            anchors,
        })
    }

    fn pid(&self, name: &str) -> ParamId {
        self.params.find(name).unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }

    fn node(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        g.param(&self.params, self.pid(name))
    }

    fn backbone(&self, g: &mut Graph, mut x: NodeId, blocks: &[Block<'_>]) -> Result<NodeId> {
        for b in blocks {
            let w = self.node(g, &format!("{}.w", b.name))?;
            let bias = self.node(g, &format!("{}.b", b.name))?;
            let gamma = self.node(g, &format!("{}.gamma", b.name))?;
            let beta = self.node(g, &format!("{}.beta", b.name))?;
            let y = g.conv2d(b.name, x, w, bias, b.stride, 1)?;
            let y = g.group_norm(&format!("{}.gn", b.name), y, gamma, beta, self.config.groups)?;
            x = g.relu(&format!("{}.relu", b.name), y)?;
        }
        Ok(x)
    }

    fn crop(&self, g: &mut Graph, name: &str, x: NodeId, boxes: &[Box2D], size: usize) -> Result<NodeId> {
        match self.config.roi_op {
            RoiOp::Align => g.roi_align(name, x, boxes, (size, size)),
            RoiOp::Pool => g.roi_pool(name, x, boxes, (size, size)),
        }
    }

    fn linear(&self, g: &mut Graph, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.node(g, &format!("{name}.w"))?;
        let b = self.node(g, &format!("{name}.b"))?;
        g.linear(name, x, w, b)
    }

    /// Full forward pass. `extra_rois` are appended to the stage-2 regions
    /// (ground-truth boxes during training).
    pub fn forward_pass(&self, input: &SceneInput, extra_rois: &[Roi]) -> Result<Pass> {
        self.forward_impl(input, extra_rois, None)
    }

    /// Forward pass whose stage-2 regions are exactly `rois`; stage-1
    /// proposals are still computed but not used. Holding the regions fixed
    /// makes the loss a smooth function of the parameters.
    pub fn forward_pass_fixed(&self, input: &SceneInput, rois: &[Roi]) -> Result<Pass> {
        self.forward_impl(input, &[], Some(rois))
    }

    fn forward_impl(&self, input: &SceneInput, extra_rois: &[Roi], fixed: Option<&[Roi]>) -> Result<Pass> {
        let cfg = &self.config;
        if (cfg.mode == InputMode::Fusion) != input.bev.is_some() {
            return Err(Error::InvalidArgument(
                "a BEV input is required in fusion mode and not accepted in RGB mode".into(),
            ));
        }
        let mut g = Graph::new();
        let img = g.input("image", input.image.clone())?;
        let img_feat = self.backbone(&mut g, img, &IMAGE_BLOCKS)?;
        let bev_feat = match &input.bev {
            Some(bev) => {
                let t = Tensor::new(vec![BEV_CHANNELS, bev.rows, bev.cols], bev.data.clone())?;
                let x = g.input("bev", t)?;
                Some(self.backbone(&mut g, x, &BEV_BLOCKS)?)
            }
            None => None,
        };

        let (stage1, objectness, rpn_deltas, proposals) = match bev_feat {
            Some(bev_feat) => self.stage1_fusion(&mut g, input, img_feat, bev_feat)?,
            None => self.stage1_rgb(&mut g, input, img_feat)?,
        };

        let rois: Vec<Roi> = match fixed {
            Some(r) => r.to_vec(),
            None => proposals.iter().map(|p| p.roi).chain(extra_rois.iter().copied()).collect(),
        };
        let (mut cls, mut deltas) = (None, None);
        if !rois.is_empty() {
            let n = rois.len();
            let s = cfg.stage2_crop;
            let img_boxes: Vec<Box2D> = rois.iter().map(|r| scale_box(&r.box_2d, 1.0 / IMAGE_STRIDE)).collect();
            let img_crop = self.crop(&mut g, "head.img_crop", img_feat, &img_boxes, s)?;
            let fused = match bev_feat {
                Some(bev_feat) => {
                    let bev = input.bev.as_ref().expect("fusion input has a BEV");
                    let boxes: Vec<Box2D> = rois
                        .iter()
                        .map(|r| {
                            project_box_to_bev(&r.box_3d, &bev.extents, bev.resolution)
                                .map(|b| scale_box(&b, 1.0 / BEV_STRIDE))
                                .unwrap_or(Box2D::new(0.0, 0.0, 0.0, 0.0))
                        })
                        .collect();
                    let bev_crop = self.crop(&mut g, "head.bev_crop", bev_feat, &boxes, s)?;
                    match cfg.fusion {
                        FusionMode::Concat => g.concat("head.fuse", img_crop, bev_crop)?,
                        FusionMode::Mean => g.mean2("head.fuse", img_crop, bev_crop)?,
                    }
                }
                None => img_crop,
            };
            let f = g.value(fused).numel() / n;
            let flat = g.reshape("head.flatten", fused, vec![n, f])?;
            let h = self.linear(&mut g, "head.fc", flat)?;
            let h = g.relu("head.fc.relu", h)?;
            cls = Some(self.linear(&mut g, "head.cls", h)?);
            deltas = Some(self.linear(&mut g, "head.reg", h)?);
        }
        Ok(Pass {
            graph: g,
            stage1,
            objectness,
            rpn_deltas,
            proposals,
            rois,
            cls,
            deltas,
        })
    }

    #[allow(clippy::type_complexity)]
    fn stage1_fusion(
        &self,
        g: &mut Graph,
        input: &SceneInput,
        img_feat: NodeId,
        bev_feat: NodeId,
    ) -> Result<(Option<NodeId>, Vec<f64>, Vec<f64>, Vec<Proposal>)> {
        let cfg = &self.config;
        let a = input.anchors_3d.len();
        if a == 0 {
            return Ok((None, Vec::new(), Vec::new(), Vec::new()));
        }
        let s = cfg.stage1_crop;
        let img_boxes: Vec<Box2D> = input.anchor_rois.iter().map(|b| scale_box(b, 1.0 / IMAGE_STRIDE)).collect();
        let bev_boxes: Vec<Box2D> = input
            .anchor_footprints
            .iter()
            .map(|b| scale_box(b, 1.0 / BEV_STRIDE))
            .collect();
        let ic = self.crop(g, "rpn.img_crop", img_feat, &img_boxes, s)?;
        let bc = self.crop(g, "rpn.bev_crop", bev_feat, &bev_boxes, s)?;
        let (w, b) = (self.node(g, "rpn.img_reduce.w")?, self.node(g, "rpn.img_reduce.b")?);
        let ir = g.pointwise("rpn.img_reduce", ic, w, b)?;
        let (w, b) = (self.node(g, "rpn.bev_reduce.w")?, self.node(g, "rpn.bev_reduce.b")?);
        let br = g.pointwise("rpn.bev_reduce", bc, w, b)?;
        let fused = g.mean2("rpn.fuse", ir, br)?;
        let flat = g.reshape("rpn.flatten", fused, vec![a, s * s])?;
        let h = self.linear(g, "rpn.fc1", flat)?;
        let h = g.relu("rpn.fc1.relu", h)?;
        let out = self.linear(g, "rpn.fc2", h)?;
        let v = &g.value(out).data;
        let objectness: Vec<f64> = (0..a).map(|i| v[i * 7]).collect();
        let deltas: Vec<f64> = (0..a).flat_map(|i| v[i * 7 + 1..i * 7 + 7].to_vec()).collect();

        let boxes: Vec<Box3D> = (0..a)
            .map(|i| decode_box3d(&input.anchors_3d[i], &deltas[i * 6..i * 6 + 6]))
            .collect();
        let projected: Vec<Option<Box2D>> = boxes
            .iter()
            .map(|b| {
                project_box_section(&input.camera, b)
                    .ok()
                    .filter(|r| b.is_valid() && r.is_finite() && r.width() > 0.0 && r.height() > 0.0)
            })
            .collect();
        let scores: Vec<f64> = (0..a)
            .map(|i| if projected[i].is_some() { objectness[i] } else { f64::NEG_INFINITY })
            .collect();
        let keep = nms(&scores, |i, j| iou_footprint(&boxes[i], &boxes[j]), cfg.nms_iou, cfg.top_n);
        let proposals = keep
            .into_iter()
            .filter_map(|i| {
                projected[i].map(|box_2d| Proposal {
                    roi: Roi {
                        box_2d,
                        box_3d: boxes[i],
                    },
                    score: sigmoid(objectness[i]),
                })
            })
            .collect();
        Ok((Some(out), objectness, deltas, proposals))
    }

    #[allow(clippy::type_complexity)]
    fn stage1_rgb(
        &self,
        g: &mut Graph,
        input: &SceneInput,
        img_feat: NodeId,
    ) -> Result<(Option<NodeId>, Vec<f64>, Vec<f64>, Vec<Proposal>)> {
        let cfg = &self.config;
        let (w, b) = (self.node(g, "rpn.conv.w")?, self.node(g, "rpn.conv.b")?);
        let h = g.conv2d("rpn.conv", img_feat, w, b, 1, 1)?;
        let h = g.relu("rpn.conv.relu", h)?;
        let (w, b) = (self.node(g, "rpn.out.w")?, self.node(g, "rpn.out.b")?);
        let out = g.conv2d("rpn.out", h, w, b, 1, 0)?;
        let t = g.value(out);
        let (fh, fw) = (t.shape[1], t.shape[2]);
        let sizes = IMAGE_ANCHOR_HEIGHTS.len();
        let n = fh * fw * sizes;
        if n != input.anchors_2d.len() {
            return Err(Error::ShapeMismatch {
                op: "rpn",
                detail: format!("{} dense anchors for a {fh}×{fw} feature map", input.anchors_2d.len()),
            });
        }
        let mut objectness = vec![0.0; n];
        let mut deltas = vec![0.0; 4 * n];
        for r in 0..fh {
            for c in 0..fw {
                for s in 0..sizes {
                    let i = (r * fw + c) * sizes + s;
                    let at = |k: usize| t.data[((s * 5 + k) * fh + r) * fw + c];
                    objectness[i] = at(0);
                    for k in 0..4 {
                        deltas[4 * i + k] = at(1 + k);
                    }
                }
            }
        }
        let (iw, ih) = (input.camera.width as f64, input.camera.height as f64);
        let boxes: Vec<Box2D> = (0..n)
            .map(|i| {
                let b = decode_box2d(&input.anchors_2d[i], &deltas[4 * i..4 * i + 4]);
                Box2D::new(b.x1.clamp(0.0, iw), b.y1.clamp(0.0, ih), b.x2.clamp(0.0, iw), b.y2.clamp(0.0, ih))
            })
            .collect();
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                if boxes[i].width() >= 1.0 && boxes[i].height() >= 2.0 {
                    objectness[i]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        // pre-NMS cut keeps the quadratic suppression cheap
        let mut order: Vec<usize> = (0..n).filter(|&i| scores[i].is_finite()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order.truncate(20 * cfg.top_n);
        let sub_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let keep = nms(
            &sub_scores,
            |a, b| iou_2d(&boxes[order[a]], &boxes[order[b]]),
            cfg.nms_iou,
            cfg.top_n,
        );
        let mut proposals = Vec::with_capacity(keep.len());
        for k in keep {
            let i = order[k];
            let box_3d = image_roi_to_3d(&input.camera, &boxes[i], cfg)?;
            proposals.push(Proposal {
                roi: Roi {
                    box_2d: boxes[i],
                    box_3d,
                },
                score: sigmoid(objectness[i]),
            });
        }
        Ok((Some(out), objectness, deltas, proposals))
    }

    /// Map per-anchor objectness and delta gradients back onto the stage-1
    /// head output layout.
    pub(crate) fn stage1_seed(&self, pass: &Pass, grad_obj: &[f64], grad_deltas: &[f64]) -> Option<(NodeId, Vec<f64>)> {
        let out = pass.stage1?;
        let t = pass.graph.value(out);
        let mut seed = vec![0.0; t.numel()];
        match self.config.mode {
            InputMode::Fusion => {
                for i in 0..grad_obj.len() {
                    seed[i * 7] = grad_obj[i];
                    seed[i * 7 + 1..i * 7 + 7].copy_from_slice(&grad_deltas[i * 6..i * 6 + 6]);
                }
            }
            InputMode::Rgb => {
                let (fh, fw) = (t.shape[1], t.shape[2]);
                let sizes = IMAGE_ANCHOR_HEIGHTS.len();
                for r in 0..fh {
                    for c in 0..fw {
                        for s in 0..sizes {
                            let i = (r * fw + c) * sizes + s;
                            let at = |k: usize| ((s * 5 + k) * fh + r) * fw + c;
                            seed[at(0)] = grad_obj[i];
                            for k in 0..4 {
                                seed[at(1 + k)] = grad_deltas[4 * i + k];
                            }
                        }
                    }
                }
            }
        }
        Some((out, seed))
    }

    /// Stage-2 outputs of a pass as detections with decoded poses.
    pub fn detections(&self, pass: &Pass) -> Result<Vec<Detection>> {
        let (Some(cls), Some(del)) = (pass.cls, pass.deltas) else {
            return Ok(Vec::new());
        };
        let k1 = self.config.num_anchor_poses + 1;
        let nd = self.config.num_deltas();
        let (lv, dv) = (&pass.graph.value(cls).data, &pass.graph.value(del).data);
        let mut out = Vec::with_capacity(pass.rois.len());
        for (i, roi) in pass.rois.iter().enumerate() {
            let deltas = dv[i * nd..(i + 1) * nd].to_vec();
            let poses = (1..k1)
                .map(|c| decode_poses(&deltas, c, &self.anchors, roi))
                .collect::<Result<_>>()?;
            out.push(Detection {
                roi: *roi,
                logits: lv[i * k1..(i + 1) * k1].to_vec(),
                deltas,
                poses,
            });
        }
        Ok(out)
    }

    /// Inference: detections for the stage-1 proposals.
    pub fn forward(&self, input: &SceneInput) -> Result<(Vec<Detection>, Pass)> {
        let pass = self.forward_pass(input, &[])?;
        Ok((self.detections(&pass)?, pass))
    }

    /// Inference followed by pose-proposal integration.
    pub fn predict(&self, input: &SceneInput) -> Result<Vec<FinalPose>> {
        let (dets, _) = self.forward(input)?;
        let props: Vec<PoseProposal> = dets.iter().map(Detection::to_proposal).collect();
        Ok(integrate_proposals(&props, self.config.integration_iou, self.config.score_floor))
    }
}

fn scale_box(b: &Box2D, s: f64) -> Box2D {
    Box2D::new(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s)
}
