//! IoU, RoI-to-ground-truth assignment and anchor-pose classification targets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::anchors::{fit_anchor_pose_to_roi, AnchorPoseSet};
use crate::bev::{project_box_to_bev, AreaExtents};
use crate::error::Result;
use crate::geometry::{norm2, Box2D, Box3D, Skeleton2D, NUM_JOINTS};

/// RoIs whose best IoU is below this are background.
pub const FOREGROUND_IOU: f64 = 0.3;

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU of the bird's-eye-view footprints on the raster.
pub fn iou_bev(a: &Box3D, b: &Box3D, extents: &AreaExtents, resolution: f64) -> Result<f64> {
    Ok(iou_2d(
        &project_box_to_bev(a, extents, resolution)?,
        &project_box_to_bev(b, extents, resolution)?,
    ))
}

/// IoU of the `(x, z)` footprints in metric coordinates. Equal to
/// [`iou_bev`] for boxes that touch the extents, and defined everywhere.
pub fn iou_footprint(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    iou_2d(
        &Box2D::new(alo[0], alo[2], ahi[0], ahi[2]),
        &Box2D::new(blo[0], blo[2], bhi[0], bhi[2]),
    )
}

/// A ground-truth pedestrian as seen by the assignment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub box_2d: Box2D,
    pub box_3d: Option<Box3D>,
    pub pose_2d: Skeleton2D,
}

/// Where RoIs are compared against ground truth.
#[derive(Debug, Clone, Copy)]
pub enum Rois<'a> {
    /// Image-plane boxes (RGB-only model).
    Image(&'a [Box2D]),
    /// 3D boxes compared by their bird's-eye-view footprint (fusion model).
    Bev(&'a [Box3D]),
}

impl Rois<'_> {
    pub fn len(&self) -> usize {
        match self {
            Rois::Image(b) => b.len(),
            Rois::Bev(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn iou(&self, i: usize, gt: &GtObject) -> f64 {
        match self {
            Rois::Image(b) => iou_2d(&b[i], &gt.box_2d),
            Rois::Bev(b) => gt.box_3d.map_or(0.0, |g| iou_footprint(&b[i], &g)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Matched ground-truth index per RoI, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Class per RoI: 0 for background, `k + 1` for anchor pose `k`.
    pub classes: Vec<usize>,
}

impl AssignmentResult {
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.matched.iter().map(Option::is_some).collect()
    }

    pub fn num_foreground(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    /// Anchor-pose index of a foreground RoI.
    pub fn k_target(&self, roi: usize) -> Option<usize> {
        self.matched[roi].map(|_| self.classes[roi] - 1)
    }
}

/// Summed joint distance between anchor pose `k` fitted into `gt.box_2d` and
/// the ground-truth pose.
pub fn anchor_pose_distance(anchors: &AnchorPoseSet, k: usize, gt: &GtObject) -> Result<f64> {
    let fitted = fit_anchor_pose_to_roi(anchors, k, &gt.box_2d)?;
    Ok((0..NUM_JOINTS)
        .map(|j| {
            norm2([
                fitted.joints[j][0] - gt.pose_2d.joints[j][0],
                fitted.joints[j][1] - gt.pose_2d.joints[j][1],
            ])
        })
        .sum())
}

/// The anchor pose closest to the ground truth (smallest summed distance).
pub fn best_anchor_pose(anchors: &AnchorPoseSet, gt: &GtObject) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for k in 0..anchors.len() {
        let d = anchor_pose_distance(anchors, k, gt)?;
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Background if every IoU is below `fg_iou`, otherwise the highest-IoU ground
/// truth (first on ties) with the closest anchor pose as class target.
pub fn assign_targets(
    rois: Rois<'_>,
    gts: &[GtObject],
    anchors: &AnchorPoseSet,
    fg_iou: f64,
) -> Result<AssignmentResult> {
    let best_k = gts
        .iter()
        .map(|g| best_anchor_pose(anchors, g))
        .collect::<Result<Vec<_>>>()?;
    let mut matched = Vec::with_capacity(rois.len());
    let mut classes = Vec::with_capacity(rois.len());
    for i in 0..rois.len() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = rois.iou(i, gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= fg_iou => {
                matched.push(Some(g));
                classes.push(best_k[g] + 1);
            }
            _ => {
                matched.push(None);
                classes.push(0);
            }
        }
    }
    Ok(AssignmentResult { matched, classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

/// IoU thresholds and minibatch size for region-proposal training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnSampling {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch: usize,
}

impl Default for RpnSampling {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            negative_iou: 0.3,
            batch: 64,
        }
    }
}

/// Label anchors from an `[anchor][gt]` IoU matrix. Each ground truth also
/// claims its highest-IoU anchors so that no object goes without a positive.
pub fn label_anchors(ious: &[Vec<f64>], num_gt: usize, params: &RpnSampling) -> Vec<AnchorLabel> {
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (g, &v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((g, v)),
                });
            match best {
                Some((g, v)) if v >= params.positive_iou => AnchorLabel::Positive(g),
                Some((_, v)) if v >= params.negative_iou => AnchorLabel::Ignored,
                _ => AnchorLabel::Negative,
            }
        })
        .collect();
    for g in 0..num_gt {
        let best = ious.iter().map(|row| row[g]).fold(0.0f64, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, row) in ious.iter().enumerate() {
            if row[g] == best && !matches!(labels[a], AnchorLabel::Positive(_)) {
                labels[a] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

/// Draw up to `batch` anchors, at most half of them positive, filling the
/// rest with negatives. Returned indices are sorted.
pub fn sample_anchors<R: Rng>(labels: &[AnchorLabel], batch: usize, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive(_)))
        .collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    pos.truncate(batch / 2);
    neg.shuffle(rng);
    neg.truncate(batch - pos.len());
    let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_basics() {
        let a = Box2D::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &Box2D::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert_eq!(iou_2d(&a, &Box2D::new(0.5, 0.0, 1.5, 1.0)), 1.0 / 3.0);
        let empty = Box2D::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou_2d(&empty, &empty), 0.0);
    }

    fn extents() -> AreaExtents {
        AreaExtents {
            x_min: -10.0,
            x_max: 10.0,
            y_min: -3.0,
            y_max: 3.0,
            z_min: 0.0,
            z_max: 40.0,
        }
    }

    #[test]
    fn bev_iou_ignores_height() {
        let a = Box3D::new([1.0, 0.5, 10.0], [0.8, 1.8, 0.8]);
        let b = Box3D::new([1.0, -0.3, 10.0], [0.8, 0.4, 0.8]);
        assert_eq!(iou_bev(&a, &a, &extents(), 0.25).unwrap(), 1.0);
        assert_eq!(iou_bev(&a, &b, &extents(), 0.25).unwrap(), 1.0);
        assert_eq!(iou_footprint(&a, &b), 1.0);
    }

    fn gt_at(box_2d: Box2D, anchors: &AnchorPoseSet, k: usize) -> GtObject {
        GtObject {
            box_2d,
            box_3d: None,
            pose_2d: fit_anchor_pose_to_roi(anchors, k, &box_2d).unwrap(),
        }
    }

    #[test]
    fn below_threshold_is_background() {
        let anchors = AnchorPoseSet::default();
        let gt = gt_at(Box2D::new(0.0, 0.0, 100.0, 100.0), &anchors, 0);
        // IoU = 29 / 100
        let roi = Box2D::new(0.0, 0.0, 29.0, 100.0);
        let r = assign_targets(Rois::Image(&[roi]), &[gt], &anchors, FOREGROUND_IOU).unwrap();
        assert_eq!(r.matched, vec![None]);
        assert_eq!(r.classes, vec![0]);
        assert_eq!(r.num_foreground(), 0);
    }

    #[test]
    fn exact_pose_gives_its_class() {
        let anchors = AnchorPoseSet::default();
        let b = Box2D::new(10.0, 20.0, 50.0, 120.0);
        let gt = gt_at(b, &anchors, 3);
        let r = assign_targets(Rois::Image(&[b]), &[gt], &anchors, FOREGROUND_IOU).unwrap();
        assert_eq!(r.matched, vec![Some(0)]);
        assert_eq!(r.k_target(0), Some(3));
        assert_eq!(r.classes[0], 4);
    }

    #[test]
    fn no_ground_truth_means_background() {
        let anchors = AnchorPoseSet::default();
        let rois = [Box2D::new(0.0, 0.0, 1.0, 1.0); 3];
        let r = assign_targets(Rois::Image(&rois), &[], &anchors, FOREGROUND_IOU).unwrap();
        assert!(r.matched.iter().all(Option::is_none));
    }

    #[test]
    fn rpn_labels_and_sampling() {
        let ious = vec![vec![0.7, 0.0], vec![0.4, 0.1], vec![0.1, 0.2], vec![0.0, 0.0]];
        let labels = label_anchors(&ious, 2, &RpnSampling::default());
        // anchor 2 is gt 1's best anchor even though it is below 0.5
        assert_eq!(
            labels,
            vec![
                AnchorLabel::Positive(0),
                AnchorLabel::Ignored,
                AnchorLabel::Positive(1),
                AnchorLabel::Negative
            ]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = sample_anchors(&labels, 64, &mut rng);
        assert_eq!(picked, vec![0, 2, 3]);
        let picked = sample_anchors(&labels, 2, &mut rng);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[1], 3, "one positive at most, the rest negatives");
    }
}
