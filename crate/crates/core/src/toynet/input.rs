//! Scene preprocessing shared by training and inference: ground fit, BEV
//! encoding, anchor generation and filtering, and training targets.

use super::model::{InputMode, ModelConfig};
use super::tensor::Tensor;
use crate::anchors::generate_anchor_grid;
use crate::assignment::{iou_2d, iou_footprint, label_anchors, AnchorLabel, GtObject, RpnSampling};
use crate::bev::{encode_bev, project_box_to_bev, AreaExtents, BevGrid, OccupancyIntegral};
use crate::error::Result;
use crate::geometry::{
    backproject_box, fit_ground_plane, project_box_section, AnchorBox3D, Box2D, Box3D, CameraIntrinsics, Plane,
    PointCloud, RansacParams,
};
use crate::synthgen::{Image, Pedestrian};

/// Downsampling of the image feature map.
pub const IMAGE_STRIDE: f64 = 4.0;
/// Downsampling of the BEV feature map.
pub const BEV_STRIDE: f64 = 2.0;
/// Heights of the dense image anchors, pixels.
pub const IMAGE_ANCHOR_HEIGHTS: [f64; 6] = [6.0, 10.0, 16.0, 26.0, 42.0, 68.0];
pub const IMAGE_ANCHOR_ASPECT: f64 = 0.45;
/// Log-size deltas are clamped to this magnitude when decoding.
const MAX_LOG_DELTA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub camera: CameraIntrinsics,
    /// `[3, H, W]`, centered around zero.
    pub image: Tensor,
    pub bev: Option<BevGrid>,
    pub ground: Option<Plane>,
    /// Non-empty 3D anchors in LiDAR mode.
    pub anchors_3d: Vec<AnchorBox3D>,
    /// Image cross-section of each 3D anchor.
    pub anchor_rois: Vec<Box2D>,
    /// BEV raster footprint of each 3D anchor.
    pub anchor_footprints: Vec<Box2D>,
    /// Dense image anchors in RGB mode, ordered `(row, col, size)`.
    pub anchors_2d: Vec<Box2D>,
}

impl SceneInput {
    pub fn num_stage1_anchors(&self) -> usize {
        if self.bev.is_some() {
            self.anchors_3d.len()
        } else {
            self.anchors_2d.len()
        }
    }
}

pub fn image_tensor(image: &Image) -> Result<Tensor> {
    Tensor::new(
        vec![3, image.height, image.width],
        image.data.iter().map(|v| v - 0.5).collect(),
    )
}

pub fn feature_size(extent: usize, strides: &[usize]) -> usize {
    strides.iter().fold(extent, |n, s| (n - 1) / s + 1)
}

/// Dense pedestrian-shaped anchors centered on every image feature cell.
pub fn dense_image_anchors(width: usize, height: usize) -> Vec<Box2D> {
    let (fw, fh) = (feature_size(width, &[2, 2, 1]), feature_size(height, &[2, 2, 1]));
    let mut out = Vec::with_capacity(fw * fh * IMAGE_ANCHOR_HEIGHTS.len());
    for r in 0..fh {
        for c in 0..fw {
            let (cx, cy) = ((c as f64 + 0.5) * IMAGE_STRIDE, (r as f64 + 0.5) * IMAGE_STRIDE);
            for h in IMAGE_ANCHOR_HEIGHTS {
                let w = h * IMAGE_ANCHOR_ASPECT;
                out.push(Box2D::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
            }
        }
    }
    out
}

/// Build the network input of one scene. In RGB mode the point cloud is
/// ignored.
pub fn prepare_input(
    image: &Image,
    cloud: &PointCloud,
    camera: &CameraIntrinsics,
    extents: &AreaExtents,
    cfg: &ModelConfig,
) -> Result<SceneInput> {
    let mut input = SceneInput {
        camera: *camera,
        image: image_tensor(image)?,
        bev: None,
        ground: None,
        anchors_3d: Vec::new(),
        anchor_rois: Vec::new(),
        anchor_footprints: Vec::new(),
        anchors_2d: Vec::new(),
    };
    if cfg.mode == InputMode::Rgb {
        input.anchors_2d = dense_image_anchors(image.width, image.height);
        return Ok(input);
    }
    let ground = fit_ground_plane(
        cloud,
        &RansacParams {
            seed: cfg.seed,
            offset: cfg.ransac_offset,
            ..RansacParams::default()
        },
    )?;
    let g = ground.height();
    let ext = extents.with_slab(g + extents.y_min, g + extents.y_max);
    let bev = encode_bev(cloud, &ext, cfg.bev_resolution)?;
    let occupancy = OccupancyIntegral::new(&bev);
    let center_plane = ground.shifted_y(-0.5 * cfg.template[1]);
    let w = camera.width as f64;
    let h = camera.height as f64;
    for a in generate_anchor_grid(&center_plane, &ext, cfg.anchor_stride, cfg.template)? {
        if a.center[2] < 1.0 {
            continue;
        }
        let Ok(foot) = project_box_to_bev(&a, &ext, cfg.bev_resolution) else { continue };
        if occupancy.count(&foot) == 0 {
            continue;
        }
        let Ok(roi) = project_box_section(camera, &a) else { continue };
        let [u, v] = roi.center();
        if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) || roi.height() < 2.0 {
            continue;
        }
        input.anchors_3d.push(a);
        input.anchor_rois.push(roi);
        input.anchor_footprints.push(foot);
    }
    input.bev = Some(bev);
    input.ground = Some(ground);
    Ok(input)
}

pub fn encode_box3d(anchor: &Box3D, gt: &Box3D) -> [f64; 6] {
    let (a, g) = (anchor, gt);
    [
        (g.center[0] - a.center[0]) / a.size[0],
        (g.center[1] - a.center[1]) / a.size[1],
        (g.center[2] - a.center[2]) / a.size[2],
        (g.size[0] / a.size[0]).ln(),
        (g.size[1] / a.size[1]).ln(),
        (g.size[2] / a.size[2]).ln(),
    ]
}

pub fn decode_box3d(anchor: &Box3D, d: &[f64]) -> Box3D {
    let a = anchor;
    let s = |i: usize| a.size[i] * d[3 + i].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    Box3D::new(
        [
            a.center[0] + d[0] * a.size[0],
            a.center[1] + d[1] * a.size[1],
            a.center[2] + d[2] * a.size[2],
        ],
        [s(0), s(1), s(2)],
    )
}

pub fn encode_box2d(anchor: &Box2D, gt: &Box2D) -> [f64; 4] {
    let ([ax, ay], [gx, gy]) = (anchor.center(), gt.center());
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

pub fn decode_box2d(anchor: &Box2D, d: &[f64]) -> Box2D {
    let [ax, ay] = anchor.center();
    let cx = ax + d[0] * anchor.width();
    let cy = ay + d[1] * anchor.height();
    let w = anchor.width() * d[2].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    let h = anchor.height() * d[3].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    Box2D::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// 3D box implied by an image box under the template-height assumption.
pub fn image_roi_to_3d(cam: &CameraIntrinsics, roi: &Box2D, cfg: &ModelConfig) -> Result<Box3D> {
    backproject_box(cam, roi, cfg.template[1], cfg.template[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    pub gts: Vec<GtObject>,
    /// Stage-1 anchor labels, aligned with the anchors of the input mode.
    pub rpn_labels: Vec<AnchorLabel>,
    /// Regression target of each positive anchor (empty for the others).
    pub rpn_targets: Vec<Vec<f64>>,
}

pub fn prepare_targets(input: &SceneInput, gt: &[Pedestrian], cfg: &ModelConfig) -> SceneTargets {
    let gts: Vec<GtObject> = gt
        .iter()
        .map(|p| GtObject {
            box_2d: p.box_2d,
            box_3d: Some(p.box_3d),
            pose_2d: p.pose_2d,
        })
        .collect();
    let sampling = RpnSampling {
        positive_iou: cfg.rpn_positive_iou,
        negative_iou: cfg.rpn_negative_iou,
        batch: cfg.rpn_batch,
    };
    let (labels, targets) = if input.bev.is_some() {
        let ious: Vec<Vec<f64>> = input
            .anchors_3d
            .iter()
            .map(|a| gt.iter().map(|p| iou_footprint(a, &p.box_3d)).collect())
            .collect();
        let labels = label_anchors(&ious, gt.len(), &sampling);
        let targets = labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                AnchorLabel::Positive(g) => encode_box3d(&input.anchors_3d[i], &gt[*g].box_3d).to_vec(),
                _ => Vec::new(),
            })
            .collect();
        (labels, targets)
    } else {
        let ious: Vec<Vec<f64>> = input
            .anchors_2d
            .iter()
            .map(|a| gt.iter().map(|p| iou_2d(a, &p.box_2d)).collect())
            .collect();
        let labels = label_anchors(&ious, gt.len(), &sampling);
        let targets = labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                AnchorLabel::Positive(g) => encode_box2d(&input.anchors_2d[i], &gt[*g].box_2d).to_vec(),
                _ => Vec::new(),
            })
            .collect();
        (labels, targets)
    };
    SceneTargets {
        gts,
        rpn_labels: labels,
        rpn_targets: targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_coders_round_trip() {
        let a = Box3D::new([1.0, 0.5, 20.0], [0.8, 1.8, 0.8]);
        let g = Box3D::new([1.3, 0.4, 20.5], [0.6, 1.7, 0.5]);
        let back = decode_box3d(&a, &encode_box3d(&a, &g));
        for i in 0..3 {
            assert!((back.center[i] - g.center[i]).abs() < 1e-12);
            assert!((back.size[i] - g.size[i]).abs() < 1e-12);
        }
        let a2 = Box2D::new(10.0, 10.0, 20.0, 40.0);
        let g2 = Box2D::new(12.0, 5.0, 19.0, 38.0);
        let b2 = decode_box2d(&a2, &encode_box2d(&a2, &g2));
        assert!((b2.x1 - g2.x1).abs() < 1e-12 && (b2.y2 - g2.y2).abs() < 1e-12);
    }

    #[test]
    fn dense_anchor_layout() {
        let a = dense_image_anchors(160, 120);
        assert_eq!(a.len(), 40 * 30 * IMAGE_ANCHOR_HEIGHTS.len());
        assert_eq!(a[0].center(), [2.0, 2.0]);
        assert_eq!(a[IMAGE_ANCHOR_HEIGHTS.len()].center(), [6.0, 2.0]);
    }
}
