//! Training losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to its
//! prediction input, so the network can seed its backward pass directly.

use crate::error::{Error, Result};
use crate::geometry::{project_point, project_point_jacobian, CameraIntrinsics, Skeleton2D, Skeleton3D, Vec2, Vec3};

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`]; bounded by ±1.
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rpn_obj: f64,
    pub rpn_reg: f64,
    pub cls: f64,
    pub pose_2d: f64,
    pub pose_3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rpn_obj: 1.0,
            rpn_reg: 1.0,
            cls: 1.0,
            pose_2d: 1.0,
            pose_3d: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub rpn_obj: f64,
    pub rpn_reg: f64,
    pub cls: f64,
    pub pose_2d: f64,
    pub pose_3d: f64,
}

impl LossReport {
    pub fn new(rpn_obj: f64, rpn_reg: f64, cls: f64, pose_2d: f64, pose_3d: f64, w: &LossWeights) -> Self {
        Self {
            total: w.rpn_obj * rpn_obj + w.rpn_reg * rpn_reg + w.cls * cls + w.pose_2d * pose_2d + w.pose_3d * pose_3d,
            rpn_obj,
            rpn_reg,
            cls,
            pose_2d,
            pose_3d,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.rpn_obj, self.rpn_reg, self.cls, self.pose_2d, self.pose_3d]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseLoss<G> {
    pub value: f64,
    /// Gradient per RoI, zero for background RoIs.
    pub grads: Vec<G>,
}

fn check_lengths(a: usize, b: usize, c: usize, op: &'static str) -> Result<()> {
    if a == b && b == c {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            detail: format!("{a} predictions, {b} targets, {c} mask entries"),
        })
    }
}

/// `1/N_fg · Σ l_i · smooth_l1(p_i, t_i)`, where the per-RoI term is the mean
/// over the 2·J joint coordinates.
pub fn loss_2d(
    preds: &[Skeleton2D],
    targets: &[Skeleton2D],
    fg: &[bool],
    beta: f64,
) -> Result<PoseLoss<[Vec2; crate::geometry::NUM_JOINTS]>> {
    check_lengths(preds.len(), targets.len(), fg.len(), "loss_2d")?;
    let n_fg = fg.iter().filter(|f| **f).count();
    let mut grads = vec![[[0.0; 2]; crate::geometry::NUM_JOINTS]; preds.len()];
    if n_fg == 0 {
        return Ok(PoseLoss { value: 0.0, grads });
    }
    let coords = (2 * crate::geometry::NUM_JOINTS) as f64;
    let scale = 1.0 / (n_fg as f64 * coords);
    let mut value = 0.0;
    for i in (0..preds.len()).filter(|&i| fg[i]) {
        let mut roi = 0.0;
        for (j, g) in grads[i].iter_mut().enumerate() {
            for a in 0..2 {
                let d = preds[i].joints[j][a] - targets[i].joints[j][a];
                roi += smooth_l1(d, beta);
                g[a] = smooth_l1_grad(d, beta) * scale;
            }
        }
        value += roi / coords;
    }
    Ok(PoseLoss {
        value: value / n_fg as f64,
        grads,
    })
}

/// Projected 3D loss: `1/N_fg · Σ l_i · smooth_l1(Pr(p_i), t_i)`, with the
/// gradient chained through the projection Jacobian.
pub fn loss_3d(
    preds: &[Skeleton3D],
    targets: &[Skeleton2D],
    cam: &CameraIntrinsics,
    fg: &[bool],
    beta: f64,
) -> Result<PoseLoss<[Vec3; crate::geometry::NUM_JOINTS]>> {
    check_lengths(preds.len(), targets.len(), fg.len(), "loss_3d")?;
    let n_fg = fg.iter().filter(|f| **f).count();
    let mut grads = vec![[[0.0; 3]; crate::geometry::NUM_JOINTS]; preds.len()];
    if n_fg == 0 {
        return Ok(PoseLoss { value: 0.0, grads });
    }
    let coords = (2 * crate::geometry::NUM_JOINTS) as f64;
    let scale = 1.0 / (n_fg as f64 * coords);
    let mut value = 0.0;
    for i in (0..preds.len()).filter(|&i| fg[i]) {
        let mut roi = 0.0;
        for (j, g) in grads[i].iter_mut().enumerate() {
            let p = preds[i].joints[j];
            let err = |_| Error::JointBehindCamera { joint: j, z: p[2] };
            let uv = project_point(cam, p).map_err(err)?;
            let jac = project_point_jacobian(cam, p).map_err(err)?;
            for a in 0..2 {
                let d = uv[a] - targets[i].joints[j][a];
                roi += smooth_l1(d, beta);
                let up = smooth_l1_grad(d, beta) * scale;
                for b in 0..3 {
                    g[b] += up * jac[a][b];
                }
            }
        }
        value += roi / coords;
    }
    Ok(PoseLoss {
        value: value / n_fg as f64,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    /// Gradient w.r.t. the row-major `[roi][class]` logits.
    pub grad: Vec<f64>,
}

/// Mean softmax cross-entropy over all RoIs; class 0 is background.
pub fn loss_cls(logits: &[f64], num_classes: usize, targets: &[usize]) -> Result<ClsLoss> {
    if num_classes == 0 || logits.len() != num_classes * targets.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_cls",
            detail: format!("{} logits for {} RoIs × {num_classes} classes", logits.len(), targets.len()),
        });
    }
    let mut grad = vec![0.0; logits.len()];
    if targets.is_empty() {
        return Ok(ClsLoss { value: 0.0, grad });
    }
    let n = targets.len() as f64;
    let mut value = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= num_classes {
            return Err(Error::InvalidArgument(format!("class target {t} out of range")));
        }
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        value += log_z - row[t];
        for c in 0..num_classes {
            let p = (row[c] - log_z).exp();
            grad[i * num_classes + c] = (p - if c == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(ClsLoss { value: value / n, grad })
}

/// One sampled anchor: its index and, for positives, the regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnSample {
    pub anchor: usize,
    pub target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub objectness: f64,
    pub regression: f64,
    pub grad_objectness: Vec<f64>,
    /// Row-major `[anchor][delta]`.
    pub grad_deltas: Vec<f64>,
}

/// Binary cross-entropy on the sampled anchors (mean) plus smooth L1 on the
/// box offsets of the positive ones (summed over coordinates, mean over
/// positives).
pub fn loss_rpn(objectness: &[f64], deltas: &[f64], dim: usize, samples: &[RpnSample], beta: f64) -> Result<RpnLoss> {
    if deltas.len() != objectness.len() * dim {
        return Err(Error::ShapeMismatch {
            op: "loss_rpn",
            detail: format!("{} deltas for {} anchors × {dim}", deltas.len(), objectness.len()),
        });
    }
    let mut grad_objectness = vec![0.0; objectness.len()];
    let mut grad_deltas = vec![0.0; deltas.len()];
    let (mut obj, mut reg) = (0.0, 0.0);
    let n = samples.len();
    let n_pos = samples.iter().filter(|s| s.target.is_some()).count();
    for s in samples {
        let x = *objectness.get(s.anchor).ok_or_else(|| {
            Error::InvalidArgument(format!("sampled anchor {} out of range", s.anchor))
        })?;
        let y = if s.target.is_some() { 1.0 } else { 0.0 };
        obj += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad_objectness[s.anchor] += (sigmoid(x) - y) / n as f64;
        if let Some(t) = &s.target {
            if t.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "loss_rpn",
                    detail: format!("target has {} values, expected {dim}", t.len()),
                });
            }
            for d in 0..dim {
                let diff = deltas[s.anchor * dim + d] - t[d];
                reg += smooth_l1(diff, beta);
                grad_deltas[s.anchor * dim + d] += smooth_l1_grad(diff, beta) / n_pos as f64;
            }
        }
    }
    Ok(RpnLoss {
        objectness: if n > 0 { obj / n as f64 } else { 0.0 },
        regression: if n_pos > 0 { reg / n_pos as f64 } else { 0.0 },
        grad_objectness,
        grad_deltas,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
