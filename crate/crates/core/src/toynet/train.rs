//! Training, evaluation and checkpoints.
//!
//! Every source of randomness is derived from the config seed, the epoch and
//! the position within the epoch, so resuming from a checkpoint replays the
//! uninterrupted run exactly.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::input::{image_roi_to_3d, prepare_input, prepare_targets, SceneInput, SceneTargets};
use super::model::{decode_poses, InputMode, Model, ModelConfig, Roi};
use super::optim::{Optimizer, OptimizerKind};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::assignment::{assign_targets, sample_anchors, AnchorLabel, Rois};
use crate::bev::AreaExtents;
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::evalkit::{FinalPose, GtPose, MetricAccumulator, MetricReport};
use crate::geometry::{JointOrder, Skeleton2D, Skeleton3D, NUM_JOINTS};
use crate::losses::{loss_2d, loss_3d, loss_cls, loss_rpn, LossReport, RpnSample};
use crate::synthgen::{flip_scene, Scene};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"HPRLCKPT";
/// Losses above this count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Loss values and parameter gradients of one scene.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: Vec<Vec<f64>>,
}

/// Stage-2 regions added during training: one per ground-truth pedestrian.
pub fn ground_truth_rois(input: &SceneInput, targets: &SceneTargets, cfg: &ModelConfig) -> Vec<Roi> {
    targets
        .gts
        .iter()
        .filter_map(|g| {
            let box_3d = match cfg.mode {
                InputMode::Fusion => g.box_3d?,
                InputMode::Rgb => image_roi_to_3d(&input.camera, &g.box_2d, cfg).ok()?,
            };
            Some(Roi {
                box_2d: g.box_2d,
                box_3d,
            })
        })
        .collect()
}

/// Forward and backward pass of one scene with the weighted multi-task loss.
/// Stage 2 sees the proposals plus one region per ground-truth pedestrian.
pub fn compute_gradients(
    model: &Model,
    input: &SceneInput,
    targets: &SceneTargets,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    compute_gradients_on(model, input, targets, rng, None)
}

/// As [`compute_gradients`], optionally with the stage-2 regions pinned to
/// `rois`. Gradients never flow into region coordinates, so with pinned
/// regions they are the exact derivative of the reported loss.
pub fn compute_gradients_on(
    model: &Model,
    input: &SceneInput,
    targets: &SceneTargets,
    rng: &mut ChaCha8Rng,
    rois: Option<&[Roi]>,
) -> Result<StepOutput> {
    let cfg = &model.config;
    let w = cfg.weights;
    let pass = match rois {
        Some(r) => model.forward_pass_fixed(input, r)?,
        None => model.forward_pass(input, &ground_truth_rois(input, targets, cfg))?,
    };
    let mut seeds = Vec::new();

    // stage 1
    let picked = sample_anchors(&targets.rpn_labels, cfg.rpn_batch, rng);
    let samples: Vec<RpnSample> = picked
        .iter()
        .map(|&a| RpnSample {
            anchor: a,
            target: match targets.rpn_labels[a] {
                AnchorLabel::Positive(_) => Some(targets.rpn_targets[a].clone()),
                _ => None,
            },
        })
        .collect();
    let dim = if cfg.mode == InputMode::Fusion { 6 } else { 4 };
    let rpn = loss_rpn(&pass.objectness, &pass.rpn_deltas, dim, &samples, cfg.rpn_beta)?;
    let go: Vec<f64> = rpn.grad_objectness.iter().map(|g| g * w.rpn_obj).collect();
    let gd: Vec<f64> = rpn.grad_deltas.iter().map(|g| g * w.rpn_reg).collect();
    if let Some(seed) = model.stage1_seed(&pass, &go, &gd) {
        seeds.push(seed);
    }

    // stage 2
    let (mut cls_value, mut l2, mut l3) = (0.0, 0.0, 0.0);
    if let (Some(cls), Some(del)) = (pass.cls, pass.deltas) {
        let assignment = if cfg.mode == InputMode::Fusion {
            let b: Vec<_> = pass.rois.iter().map(|r| r.box_3d).collect();
            assign_targets(Rois::Bev(&b), &targets.gts, &model.anchors, cfg.foreground_iou)?
        } else {
            let b: Vec<_> = pass.rois.iter().map(|r| r.box_2d).collect();
            assign_targets(Rois::Image(&b), &targets.gts, &model.anchors, cfg.foreground_iou)?
        };
        let k1 = cfg.num_anchor_poses + 1;
        let logits = &pass.graph.value(cls).data;
        let cl = loss_cls(logits, k1, &assignment.classes)?;
        cls_value = cl.value;
        seeds.push((cls, cl.grad.iter().map(|g| g * w.cls).collect()));

        let nd = cfg.num_deltas();
        let deltas = &pass.graph.value(del).data;
        let fg = assignment.foreground_mask();
        let n = pass.rois.len();
        let blank2 = Skeleton2D::new([[0.0; 2]; NUM_JOINTS]);
        let blank3 = Skeleton3D::new([[0.0, 0.0, 1.0]; NUM_JOINTS]);
        let (mut p2, mut p3, mut t2) = (vec![blank2; n], vec![blank3; n], vec![blank2; n]);
        for i in 0..n {
            if let Some(g) = assignment.matched[i] {
                let (a, b) = decode_poses(&deltas[i * nd..(i + 1) * nd], assignment.classes[i], &model.anchors, &pass.rois[i])?;
                p2[i] = a;
                p3[i] = b;
                t2[i] = targets.gts[g].pose_2d;
            }
        }
        let lp2 = loss_2d(&p2, &t2, &fg, cfg.smooth_l1_beta)?;
        let lp3 = loss_3d(&p3, &t2, &input.camera, &fg, cfg.smooth_l1_beta)?;
        l2 = lp2.value;
        l3 = lp3.value;
        let mut seed = vec![0.0; deltas.len()];
        for i in (0..n).filter(|&i| fg[i]) {
            let off = i * nd + assignment.classes[i] * 5 * NUM_JOINTS;
            let (bw, bh) = (pass.rois[i].box_2d.width(), pass.rois[i].box_2d.height());
            for j in 0..NUM_JOINTS {
                seed[off + 2 * j] = w.pose_2d * lp2.grads[i][j][0] * bw;
                seed[off + 2 * j + 1] = w.pose_2d * lp2.grads[i][j][1] * bh;
                for a in 0..3 {
                    seed[off + 2 * NUM_JOINTS + 3 * j + a] = w.pose_3d * lp3.grads[i][j][a];
                }
            }
        }
        seeds.push((del, seed));
    }

    let report = LossReport::new(rpn.objectness, rpn.regression, cls_value, l2, l3, &w);
    let grads = pass.graph.backward(&model.params, &seeds)?;
    Ok(StepOutput { report, grads })
}

/// Network input and targets of a training scene.
pub fn prepare_training_scene(scene: &Scene, extents: &AreaExtents, cfg: &ModelConfig) -> Result<(SceneInput, SceneTargets)> {
    let input = prepare_input(&scene.image, &scene.cloud, &scene.camera, extents, cfg)?;
    let targets = prepare_targets(&input, &scene.gt, cfg);
    Ok((input, targets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the scenes of the epoch.
    pub loss: LossReport,
}

pub fn loss_log_header() -> &'static str {
    "epoch,learning_rate,total,rpn_obj,rpn_reg,cls,pose_2d,pose_3d\n"
}

impl EpochLog {
    /// One CSV row; floats use the shortest round-trip representation.
    pub fn to_csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.epoch, self.learning_rate, l.total, l.rpn_obj, l.rpn_reg, l.cls, l.pose_2d, l.pose_3d
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let optimizer = Optimizer::new(model.config.optimizer, &model.params);
        Self {
            model,
            optimizer,
            epoch: 0,
            step: 0,
        }
    }

    /// `(scene, flipped)` pairs of an epoch in training order.
    pub fn epoch_order(&self, num_scenes: usize, epoch: usize) -> Vec<(usize, bool)> {
        let mut items: Vec<(usize, bool)> = (0..num_scenes).map(|i| (i, false)).collect();
        if self.model.config.flip {
            items.extend((0..num_scenes).map(|i| (i, true)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.model.config.seed, epoch as u64, u64::MAX));
        items.shuffle(&mut rng);
        items
    }

    /// One optimizer step on a batch; gradients are averaged over the batch.
    pub fn train_batch(&mut self, batch: &[(&SceneInput, &SceneTargets)], seeds: &[u64], lr: f64) -> Result<LossReport> {
        let model = &self.model;
        let outs: Vec<StepOutput> = batch
            .par_iter()
            .zip(seeds)
            .map(|((input, targets), s)| compute_gradients(model, input, targets, &mut ChaCha8Rng::seed_from_u64(*s)))
            .collect::<Result<_>>()?;
        let mut grads = self.model.params.zero_grads();
        let mut mean = [0.0; 6];
        let scale = 1.0 / outs.len().max(1) as f64;
        for o in &outs {
            let r = &o.report;
            if !r.is_finite() || r.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    step: self.step as usize,
                    detail: format!("loss {r:?}"),
                });
            }
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
            for (m, v) in mean.iter_mut().zip([r.rpn_obj, r.rpn_reg, r.cls, r.pose_2d, r.pose_3d, r.total]) {
                *m += v * scale;
            }
        }
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(LossReport {
            rpn_obj: mean[0],
            rpn_reg: mean[1],
            cls: mean[2],
            pose_2d: mean[3],
            pose_3d: mean[4],
            total: mean[5],
        })
    }

    /// Run the next epoch over `scenes`.
    pub fn train_epoch(&mut self, scenes: &[&Scene], extents: &AreaExtents, order: &JointOrder) -> Result<EpochLog> {
        let cfg = self.model.config.clone();
        let epoch = self.epoch;
        let lr = cfg.learning_rate_at(epoch);
        let items = self.epoch_order(scenes.len(), epoch);
        let mut sum = [0.0; 6];
        for (b, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let prepared: Vec<(SceneInput, SceneTargets)> = chunk
                .par_iter()
                .map(|&(i, flipped)| {
                    if flipped {
                        prepare_training_scene(&flip_scene(scenes[i], order)?, extents, &cfg)
                    } else {
                        prepare_training_scene(scenes[i], extents, &cfg)
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<(&SceneInput, &SceneTargets)> = prepared.iter().map(|(a, b)| (a, b)).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| mix(cfg.seed, epoch as u64, (b * cfg.batch_size + k) as u64))
                .collect();
            let r = self.train_batch(&refs, &seeds, lr)?;
            let n = chunk.len() as f64;
            for (s, v) in sum.iter_mut().zip([r.rpn_obj, r.rpn_reg, r.cls, r.pose_2d, r.pose_3d, r.total]) {
                *s += v * n;
            }
            log::debug!("epoch {epoch} batch {b}: total {:.6}", r.total);
        }
        let n = items.len().max(1) as f64;
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            learning_rate: lr,
            loss: LossReport {
                rpn_obj: sum[0] / n,
                rpn_reg: sum[1] / n,
                cls: sum[2] / n,
                pose_2d: sum[3] / n,
                pose_3d: sum[4] / n,
                total: sum[5] / n,
            },
        })
    }

    /// Train until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn train(
        &mut self,
        scenes: &[&Scene],
        extents: &AreaExtents,
        order: &JointOrder,
        mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.model.config.epochs {
            let log = self.train_epoch(scenes, extents, order)?;
            log::info!("epoch {} lr {} loss {:.6}", log.epoch, log.learning_rate, log.loss.total);
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = Vec::new();
        put_str(&mut p, &self.model.config.to_kv().to_text());
        put_u64(&mut p, self.epoch as u64);
        put_u64(&mut p, self.step);
        p.push(match self.optimizer.kind {
            OptimizerKind::Adam => 0,
            OptimizerKind::RmsProp => 1,
        });
        put_u64(&mut p, self.optimizer.t);
        put_u64(&mut p, self.model.params.len() as u64);
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            put_str(&mut p, name);
            put_u64(&mut p, t.shape.len() as u64);
            for d in &t.shape {
                put_u64(&mut p, *d as u64);
            }
            for data in [&t.data, &self.optimizer.m[i], &self.optimizer.v[i]] {
                for v in data.iter() {
                    p.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(p.len() + 24);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out.extend_from_slice(&p);
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            if bytes.len() < 8 && CHECKPOINT_MAGIC.starts_with(&bytes) {
                return Err(Error::Truncated { path: path.into() });
            }
            return Err(Error::format(path, "not a checkpoint"));
        }
        if bytes.len() < 24 {
            return Err(Error::Truncated { path: path.into() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
        if bytes.len() - 24 < len {
            return Err(Error::Truncated { path: path.into() });
        }
        if bytes.len() - 24 > len {
            return Err(Error::format(path, "trailing bytes"));
        }
        let payload = &bytes[24..];
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum { path: path.into() });
        }
        let mut r = Reader { b: payload, pos: 0, path };
        let config = ModelConfig::from_kv(&KvMap::parse(&r.str()?)?)?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let kind = match r.u8()? {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::RmsProp,
            k => return Err(Error::format(path, format!("unknown optimizer {k}"))),
        };
        let t = r.u64()?;
        let mut model = Model::new(config)?;
        let count = r.u64()? as usize;
        let mut store = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u64()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            m.push(r.f64s(n)?);
            v.push(r.f64s(n)?);
            store.push_raw(name, Tensor::new(shape, data)?);
        }
        model.params.load_from(&store).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            other => other,
        })?;
        let mut optimizer = Optimizer::new(kind, &model.params);
        optimizer.t = t;
        optimizer.m = m;
        optimizer.v = v;
        Ok(Self {
            model,
            optimizer,
            epoch,
            step,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::format(self.path, "payload ends early"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Predictions of one scene.
pub fn predict_scene(model: &Model, scene: &Scene, extents: &AreaExtents) -> Result<Vec<FinalPose>> {
    let input = prepare_input(&scene.image, &scene.cloud, &scene.camera, extents, &model.config)?;
    model.predict(&input)
}

pub fn gt_poses(scene: &Scene) -> Vec<GtPose> {
    scene
        .gt
        .iter()
        .map(|p| GtPose {
            pose_2d: p.pose_2d,
            box_3d: p.box_3d,
        })
        .collect()
}

/// Metrics over `scenes` plus every prediction tagged with its scene id.
pub fn evaluate(
    model: &Model,
    scenes: &[&Scene],
    extents: &AreaExtents,
    order: &JointOrder,
) -> Result<(MetricReport, Vec<(u64, FinalPose)>)> {
    let preds: Vec<Vec<FinalPose>> = scenes
        .par_iter()
        .map(|s| predict_scene(model, s, extents))
        .collect::<Result<_>>()?;
    let mut acc = MetricAccumulator::default();
    let mut all = Vec::new();
    for (s, p) in scenes.iter().zip(preds) {
        acc.add_scene(&p, &gt_poses(s), order);
        all.extend(p.into_iter().map(|f| (s.id, f)));
    }
    Ok((acc.report(), all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scene, SceneConfig};

    fn tiny(mode: InputMode) -> ModelConfig {
        ModelConfig {
            channels: 4,
            fc_hidden: 8,
            rpn_hidden: 8,
            top_n: 4,
            batch_size: 2,
            ..ModelConfig::desk(mode)
        }
    }

    fn extents() -> AreaExtents {
        crate::anchors::extents_from_locations(&[[-8.0, 0.0, 6.0], [8.0, 0.0, 30.0]], 0.2, crate::synthgen::DEFAULT_SLAB)
            .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::new(Model::new(tiny(InputMode::Rgb)).unwrap());
        st.epoch = 3;
        st.step = 17;
        st.optimizer.t = 17;
        st.optimizer.m[0][0] = 0.25;
        let path = dir.path().join("c.ckpt");
        st.save(&path).unwrap();
        assert_eq!(TrainState::load(&path).unwrap(), st);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(TrainState::load(&path), Err(Error::Checksum { .. })));
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(TrainState::load(&path), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(TrainState::load(&path), Err(Error::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn train_steps_are_finite_in_both_modes() {
        let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(40 + i, &SceneConfig::default()).unwrap()).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        for mode in [InputMode::Rgb, InputMode::Fusion] {
            let mut st = TrainState::new(Model::new(tiny(mode)).unwrap());
            let log = st.train_epoch(&refs, &extents(), &JointOrder::default()).unwrap();
            assert!(log.loss.is_finite() && log.loss.total > 0.0, "{mode:?}: {log:?}");
            assert_eq!(st.step, 1);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let scene = generate_scene(5, &SceneConfig::default()).unwrap();
        let cfg = tiny(InputMode::Fusion);
        let mut st = TrainState::new(Model::new(cfg.clone()).unwrap());
        let before = st.model.params.clone();
        let (i, t) = prepare_training_scene(&scene, &extents(), &cfg).unwrap();
        st.train_batch(&[(&i, &t)], &[1], 0.0).unwrap();
        assert_eq!(st.model.params, before);
    }
}
