//! Pose-proposal integration and the metric suite: 2D MPJPE, PCKh, CDE, XYE.

use std::fmt::Write as _;
use std::path::Path;

use crate::assignment::iou_2d;
use crate::error::{Error, Result};
use crate::geometry::{norm2, Box2D, Box3D, JointOrder, Skeleton2D, Skeleton3D, NUM_JOINTS};

pub const INTEGRATION_IOU: f64 = 0.5;
pub const SCORE_FLOOR: f64 = 0.1;
pub const MATCH_IOU: f64 = 0.3;
pub const PCKH_ALPHA: f64 = 0.5;

/// One decoded detection at its best foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseProposal {
    pub box_2d: Box2D,
    pub score: f64,
    pub pose_2d: Skeleton2D,
    pub pose_3d: Skeleton3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalPose {
    pub pose_2d: Skeleton2D,
    pub pose_3d: Skeleton3D,
    pub confidence: f64,
}

/// Indices sorted by descending key, ties in input order.
fn order_desc(keys: impl Iterator<Item = f64>) -> Vec<usize> {
    let keys: Vec<f64> = keys.collect();
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    idx
}

/// Greedy grouping by descending score: each still-unassigned proposal starts
/// a group that absorbs every unassigned proposal whose box overlaps the
/// leader's by at least `iou_threshold`. A group's poses are the
/// score-weighted means of its members and its confidence the summed score,
/// clamped to 1. Groups below `score_floor` are dropped.
pub fn integrate_proposals(proposals: &[PoseProposal], iou_threshold: f64, score_floor: f64) -> Vec<FinalPose> {
    let order = order_desc(proposals.iter().map(|p| p.score));
    let mut taken = vec![false; proposals.len()];
    let mut out = Vec::new();
    for (pos, &lead) in order.iter().enumerate() {
        if taken[lead] {
            continue;
        }
        taken[lead] = true;
        let mut members = vec![lead];
        for &other in &order[pos + 1..] {
            if !taken[other] && iou_2d(&proposals[lead].box_2d, &proposals[other].box_2d) >= iou_threshold {
                taken[other] = true;
                members.push(other);
            }
        }
        let total: f64 = members.iter().map(|&m| proposals[m].score.max(0.0)).sum();
        let confidence = total.clamp(0.0, 1.0);
        if confidence < score_floor {
            continue;
        }
        let weight = |m: usize| {
            if total > 0.0 {
                proposals[m].score.max(0.0) / total
            } else {
                1.0 / members.len() as f64
            }
        };
        let mut p2 = proposals[lead].pose_2d;
        let mut p3 = proposals[lead].pose_3d;
        p2.joints = [[0.0; 2]; NUM_JOINTS];
        p3.joints = [[0.0; 3]; NUM_JOINTS];
        for &m in &members {
            let w = weight(m);
            for j in 0..NUM_JOINTS {
                for a in 0..2 {
                    p2.joints[j][a] += w * proposals[m].pose_2d.joints[j][a];
                }
                for a in 0..3 {
                    p3.joints[j][a] += w * proposals[m].pose_3d.joints[j][a];
                }
            }
        }
        out.push(FinalPose {
            pose_2d: p2,
            pose_3d: p3,
            confidence,
        });
    }
    out
}

/// For each ground-truth pose, the index of the prediction matched to it.
///
/// Predictions are visited by descending confidence and take the free ground
/// truth with the highest pose-box IoU, provided it reaches `iou_threshold`.
pub fn match_poses(preds: &[FinalPose], gts: &[Skeleton2D], iou_threshold: f64) -> Vec<Option<usize>> {
    let mut matched = vec![None; gts.len()];
    let gt_boxes: Vec<Box2D> = gts.iter().map(Skeleton2D::bounding_box).collect();
    for p in order_desc(preds.iter().map(|p| p.confidence)) {
        let pb = preds[p].pose_2d.bounding_box();
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt_boxes.iter().enumerate() {
            if matched[g].is_some() {
                continue;
            }
            let iou = iou_2d(&pb, gb);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = Some(p);
        }
    }
    matched
}

fn joint_error(a: &Skeleton2D, b: &Skeleton2D, j: usize) -> f64 {
    norm2([a.joints[j][0] - b.joints[j][0], a.joints[j][1] - b.joints[j][1]])
}

/// Sum of joint errors and number of joints over matched pairs and visible
/// ground-truth joints.
pub fn mpjpe_terms(preds: &[Skeleton2D], gts: &[Skeleton2D], matching: &[Option<usize>]) -> (f64, usize) {
    let (mut sum, mut n) = (0.0, 0);
    for (g, m) in matching.iter().enumerate() {
        let Some(p) = m else { continue };
        for j in (0..NUM_JOINTS).filter(|&j| gts[g].visible[j]) {
            sum += joint_error(&preds[*p], &gts[g], j);
            n += 1;
        }
    }
    (sum, n)
}

/// Mean Euclidean joint error in pixels; 0 when nothing is matched.
pub fn mpjpe_2d(preds: &[Skeleton2D], gts: &[Skeleton2D], matching: &[Option<usize>]) -> f64 {
    let (sum, n) = mpjpe_terms(preds, gts, matching);
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PckhCounts {
    pub correct: usize,
    pub total: usize,
    /// Ground-truth poses skipped for a zero-length head segment.
    pub skipped: usize,
}

impl PckhCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub fn pckh_counts(
    preds: &[Skeleton2D],
    gts: &[Skeleton2D],
    matching: &[Option<usize>],
    alpha: f64,
    order: &JointOrder,
) -> PckhCounts {
    let mut c = PckhCounts::default();
    for (g, m) in matching.iter().enumerate() {
        let seg = gts[g].head_segment(order);
        if !(seg > 0.0) {
            c.skipped += 1;
            continue;
        }
        for j in (0..NUM_JOINTS).filter(|&j| gts[g].visible[j]) {
            c.total += 1;
            if let Some(p) = m {
                if joint_error(&preds[*p], &gts[g], j) < alpha * seg {
                    c.correct += 1;
                }
            }
        }
    }
    c
}

/// Fraction of visible ground-truth joints within `alpha` head segments.
pub fn pckh(preds: &[Skeleton2D], gts: &[Skeleton2D], matching: &[Option<usize>], alpha: f64) -> f64 {
    pckh_counts(preds, gts, matching, alpha, &JointOrder::default()).fraction()
}

/// Depth gap between the box around the predicted joints and the
/// ground-truth box.
pub fn cde(pred: &Skeleton3D, gt: &Box3D) -> f64 {
    (pred.bounding_box().center[2] - gt.center[2]).abs()
}

/// Center error orthogonal to the depth axis.
pub fn xye(pred: &Skeleton3D, gt: &Box3D) -> f64 {
    let c = pred.bounding_box().center;
    norm2([c[0] - gt.center[0], c[1] - gt.center[1]])
}

/// Ground truth of one scene as seen by the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPose {
    pub pose_2d: Skeleton2D,
    pub box_3d: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricAccumulator {
    mpjpe_sum: f64,
    mpjpe_joints: usize,
    pckh: PckhCounts,
    cde_sum: f64,
    xye_sum: f64,
    matched: usize,
    gt: usize,
    predictions: usize,
}

impl MetricAccumulator {
    pub fn add_scene(&mut self, preds: &[FinalPose], gts: &[GtPose], order: &JointOrder) {
        let gt2: Vec<Skeleton2D> = gts.iter().map(|g| g.pose_2d).collect();
        let pr2: Vec<Skeleton2D> = preds.iter().map(|p| p.pose_2d).collect();
        let matching = match_poses(preds, &gt2, MATCH_IOU);
        let (s, n) = mpjpe_terms(&pr2, &gt2, &matching);
        self.mpjpe_sum += s;
        self.mpjpe_joints += n;
        let c = pckh_counts(&pr2, &gt2, &matching, PCKH_ALPHA, order);
        self.pckh.correct += c.correct;
        self.pckh.total += c.total;
        self.pckh.skipped += c.skipped;
        for (g, m) in matching.iter().enumerate() {
            if let Some(p) = m {
                self.cde_sum += cde(&preds[*p].pose_3d, &gts[g].box_3d);
                self.xye_sum += xye(&preds[*p].pose_3d, &gts[g].box_3d);
                self.matched += 1;
            }
        }
        self.gt += gts.len();
        self.predictions += preds.len();
    }

    pub fn report(&self) -> MetricReport {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        MetricReport {
            mpjpe_2d: mean(self.mpjpe_sum, self.mpjpe_joints),
            mpjpe_joints: self.mpjpe_joints,
            pckh: self.pckh.fraction(),
            pckh_joints: self.pckh.total,
            pckh_skipped: self.pckh.skipped,
            cde: mean(self.cde_sum, self.matched),
            xye: mean(self.xye_sum, self.matched),
            matched: self.matched,
            gt_count: self.gt,
            prediction_count: self.predictions,
        }
    }
}

/// Matched-only means plus the counts needed to judge recall and false
/// positives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub mpjpe_2d: f64,
    pub mpjpe_joints: usize,
    pub pckh: f64,
    pub pckh_joints: usize,
    pub pckh_skipped: usize,
    pub cde: f64,
    pub xye: f64,
    pub matched: usize,
    pub gt_count: usize,
    pub prediction_count: usize,
}

impl MetricReport {
    pub fn recall(&self) -> f64 {
        if self.gt_count == 0 {
            0.0
        } else {
            self.matched as f64 / self.gt_count as f64
        }
    }

    pub fn false_positives(&self) -> usize {
        self.prediction_count - self.matched
    }

    pub fn to_csv(&self) -> String {
        let rows: [(&str, f64, usize); 7] = [
            ("mpjpe_2d", self.mpjpe_2d, self.mpjpe_joints),
            ("pckh", self.pckh, self.pckh_joints),
            ("cde", self.cde, self.matched),
            ("xye", self.xye, self.matched),
            ("recall", self.recall(), self.gt_count),
            ("false_positives", self.false_positives() as f64, self.prediction_count),
            ("pckh_skipped", self.pckh_skipped as f64, self.pckh_skipped),
        ];
        let mut s = String::from("metric,value,count\n");
        for (name, v, n) in rows {
            let _ = writeln!(s, "{name},{v:.6},{n}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn pose_record_header() -> String {
    let mut s = String::from("scene_id,confidence");
    for j in 0..NUM_JOINTS {
        let _ = write!(s, ",u{j},v{j}");
    }
    for j in 0..NUM_JOINTS {
        let _ = write!(s, ",x{j},y{j},z{j}");
    }
    s.push('\n');
    s
}

pub fn format_pose_record(scene_id: u64, confidence: f64, p2: &Skeleton2D, p3: &Skeleton3D) -> String {
    let mut s = format!("{scene_id},{confidence:.6}");
    for j in &p2.joints {
        let _ = write!(s, ",{:.6},{:.6}", j[0], j[1]);
    }
    for j in &p3.joints {
        let _ = write!(s, ",{:.6},{:.6},{:.6}", j[0], j[1], j[2]);
    }
    s.push('\n');
    s
}

/// Parse a prediction dump back into per-record `(scene_id, FinalPose)`.
/// Values carry the 6-decimal rounding of the file.
pub fn parse_pose_records(text: &str, path: &Path) -> Result<Vec<(u64, FinalPose)>> {
    let mut out = Vec::new();
    let expected = 2 + 5 * NUM_JOINTS;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expected {
            return Err(Error::format(path, format!("line {}: {} fields, expected {expected}", i + 1, f.len())));
        }
        let bad = || Error::format(path, format!("line {}: invalid number", i + 1));
        let scene_id: u64 = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let mut p2 = Skeleton2D::new([[0.0; 2]; NUM_JOINTS]);
        let mut p3 = Skeleton3D::new([[0.0; 3]; NUM_JOINTS]);
        for j in 0..NUM_JOINTS {
            p2.joints[j] = [v[1 + 2 * j], v[2 + 2 * j]];
            let b = 1 + 2 * NUM_JOINTS + 3 * j;
            p3.joints[j] = [v[b], v[b + 1], v[b + 2]];
        }
        out.push((
            scene_id,
            FinalPose {
                pose_2d: p2,
                pose_3d: p3,
                confidence: v[0],
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose2(off: f64) -> Skeleton2D {
        let mut j = [[0.0; 2]; NUM_JOINTS];
        for (i, p) in j.iter_mut().enumerate() {
            *p = [10.0 + off + (i % 3) as f64 * 4.0, 10.0 + i as f64 * 3.0];
        }
        Skeleton2D::new(j)
    }

    fn pose3(dz: f64) -> Skeleton3D {
        let mut j = [[0.0; 3]; NUM_JOINTS];
        for (i, p) in j.iter_mut().enumerate() {
            *p = [(i % 3) as f64 * 0.2 - 0.2, i as f64 * 0.1 - 0.6, 10.0 + dz + (i % 2) as f64 * 0.1];
        }
        Skeleton3D::new(j)
    }

    fn proposal(x: f64, score: f64, off: f64) -> PoseProposal {
        PoseProposal {
            box_2d: Box2D::new(x, 0.0, x + 10.0, 20.0),
            score,
            pose_2d: pose2(off),
            pose_3d: pose3(off),
        }
    }

    #[test]
    fn single_proposal_is_itself() {
        let p = proposal(0.0, 0.7, 0.0);
        let out = integrate_proposals(&[p.clone()], INTEGRATION_IOU, SCORE_FLOOR);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.7);
        assert_eq!(out[0].pose_2d, p.pose_2d);
    }

    #[test]
    fn three_overlapping_and_one_disjoint() {
        let props = vec![
            proposal(0.0, 0.5, 0.0),
            proposal(1.0, 0.3, 2.0),
            proposal(0.5, 0.2, 4.0),
            proposal(100.0, 0.4, 0.0),
        ];
        let out = integrate_proposals(&props, INTEGRATION_IOU, SCORE_FLOOR);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 1.0);
        // offsets 0, 2, 4 weighted 0.5, 0.3, 0.2 → 1.4
        let want = pose2(1.4);
        for j in 0..NUM_JOINTS {
            assert!((out[0].pose_2d.joints[j][0] - want.joints[j][0]).abs() < 1e-12);
        }
        assert_eq!(out[1].confidence, 0.4);
    }

    #[test]
    fn floor_drops_weak_groups() {
        let out = integrate_proposals(&[proposal(0.0, 0.05, 0.0)], INTEGRATION_IOU, SCORE_FLOOR);
        assert!(out.is_empty());
    }

    #[test]
    fn mpjpe_and_pckh_basics() {
        let g = vec![pose2(0.0)];
        let m = vec![Some(0)];
        assert_eq!(mpjpe_2d(&g, &g, &m), 0.0);
        assert_eq!(pckh(&g, &g, &m, 0.5), 1.0);
        let shifted = vec![g[0].translated(5.0, 0.0)];
        assert!((mpjpe_2d(&shifted, &g, &m) - 5.0).abs() < 1e-12);
        let far = vec![g[0].translated(1e4, 0.0)];
        assert_eq!(pckh(&far, &g, &m, 0.5), 0.0);
        assert_eq!(pckh(&g, &g, &[None], 0.5), 0.0);
    }

    #[test]
    fn cde_xye_axes() {
        let p = pose3(0.0);
        let b = p.bounding_box();
        assert_eq!(cde(&p, &b), 0.0);
        assert_eq!(xye(&p, &b), 0.0);
        assert!((cde(&p.translated([0.0, 0.0, 2.0]), &b) - 2.0).abs() < 1e-12);
        assert!((xye(&p.translated([3.0, 0.0, 0.0]), &b) - 3.0).abs() < 1e-12);
        assert_eq!(xye(&p.translated([0.0, 0.0, 4.0]), &b), 0.0);
    }

    #[test]
    fn report_format() {
        let r = MetricReport {
            mpjpe_2d: 1.5,
            mpjpe_joints: 26,
            pckh: 1.0,
            pckh_joints: 26,
            ..Default::default()
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value,count\nmpjpe_2d,1.500000,26\npckh,1.000000,26\n"));
    }

    #[test]
    fn record_round_trip() {
        let text = pose_record_header() + &format_pose_record(3, 0.25, &pose2(0.5), &pose3(0.0));
        let recs = parse_pose_records(&text, Path::new("x")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].0, 3);
        assert_eq!(recs[0].1.pose_2d, pose2(0.5));
        assert_eq!(pose_record_header().split(',').count(), 2 + 5 * NUM_JOINTS);
    }
}
