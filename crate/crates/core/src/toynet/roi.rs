//! Feature cropping for regions of interest and two-stream fusion.
//!
//! Boxes are given in continuous feature-map coordinates where cell `i` spans
//! `[i, i + 1)`. Both operators emit `[N, C, oh, ow]`.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Box2D;

/// Bilinear samples per output bin along each axis.
pub const SAMPLING_RATIO: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoiOp {
    #[default]
    Align,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Concat,
    Mean,
}

fn clip(b: &Box2D, w: usize, h: usize) -> Box2D {
    let (w, h) = (w as f64, h as f64);
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    Box2D::new(x1, y1, b.x2.clamp(x1, w), b.y2.clamp(y1, h))
}

/// Interpolation taps `(bin, flat spatial index, weight)` of one box.
pub(crate) fn align_taps(b: &Box2D, h: usize, w: usize, out: (usize, usize)) -> Vec<(usize, usize, f64)> {
    let b = clip(b, w, h);
    let (oh, ow) = out;
    let (bin_w, bin_h) = (b.width() / ow as f64, b.height() / oh as f64);
    let s = SAMPLING_RATIO as f64;
    let norm = 1.0 / (s * s);
    let mut taps = Vec::with_capacity(oh * ow * SAMPLING_RATIO * SAMPLING_RATIO * 4);
    for by in 0..oh {
        for bx in 0..ow {
            let bin = by * ow + bx;
            for sy in 0..SAMPLING_RATIO {
                let yy = (b.y1 + (by as f64 + (sy as f64 + 0.5) / s) * bin_h - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = yy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ly = yy - y0 as f64;
                for sx in 0..SAMPLING_RATIO {
                    let xx =
                        (b.x1 + (bx as f64 + (sx as f64 + 0.5) / s) * bin_w - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = xx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let lx = xx - x0 as f64;
                    taps.push((bin, y0 * w + x0, (1.0 - ly) * (1.0 - lx) * norm));
                    taps.push((bin, y0 * w + x1, (1.0 - ly) * lx * norm));
                    taps.push((bin, y1 * w + x0, ly * (1.0 - lx) * norm));
                    taps.push((bin, y1 * w + x1, ly * lx * norm));
                }
            }
        }
    }
    taps
}

fn check_out(out: (usize, usize)) -> Result<()> {
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::InvalidArgument("RoI output size must be positive".into()));
    }
    Ok(())
}

/// Bilinear RoI align with [`SAMPLING_RATIO`]² samples per bin, averaged.
pub fn roi_align(features: &Tensor, boxes: &[Box2D], out: (usize, usize)) -> Result<Tensor> {
    let [c, h, w] = features.chw("roi_align")?;
    check_out(out)?;
    let bins = out.0 * out.1;
    let mut data = vec![0.0; boxes.len() * c * bins];
    for (n, b) in boxes.iter().enumerate() {
        let taps = align_taps(b, h, w, out);
        for ch in 0..c {
            let src = &features.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut data[(n * c + ch) * bins..(n * c + ch + 1) * bins];
            for &(bin, idx, wt) in &taps {
                dst[bin] += wt * src[idx];
            }
        }
    }
    Tensor::new(vec![boxes.len(), c, out.0, out.1], data)
}

pub(crate) fn roi_align_backward(
    shape: [usize; 3],
    boxes: &[Box2D],
    out: (usize, usize),
    dout: &[f64],
    dx: &mut [f64],
) {
    let [c, h, w] = shape;
    let bins = out.0 * out.1;
    for (n, b) in boxes.iter().enumerate() {
        let taps = align_taps(b, h, w, out);
        for ch in 0..c {
            let g = &dout[(n * c + ch) * bins..(n * c + ch + 1) * bins];
            let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
            for &(bin, idx, wt) in &taps {
                dst[idx] += wt * g[bin];
            }
        }
    }
}

/// Spatial cells `[start, end)` per bin after rounding the box to the grid.
fn pool_ranges(lo: f64, hi: f64, bins: usize, extent: usize) -> Vec<(usize, usize)> {
    let q0 = (lo.round().max(0.0) as usize).min(extent);
    let q1 = (hi.round().max(0.0) as usize).min(extent);
    let size = q1.saturating_sub(q0).max(1);
    (0..bins)
        .map(|j| {
            let start = (q0 + j * size / bins).min(extent);
            let end = (q0 + ((j + 1) * size).div_ceil(bins)).min(extent);
            (start, end)
        })
        .collect()
}

/// Quantized max pooling; also returns, per output value, the flat input index
/// that won (`None` for empty bins, which output 0).
pub(crate) fn roi_pool_with_argmax(
    features: &Tensor,
    boxes: &[Box2D],
    out: (usize, usize),
) -> Result<(Tensor, Vec<Option<usize>>)> {
    let [c, h, w] = features.chw("roi_pool")?;
    check_out(out)?;
    let (oh, ow) = out;
    let bins = oh * ow;
    let mut data = vec![0.0; boxes.len() * c * bins];
    let mut argmax = vec![None; data.len()];
    for (n, b) in boxes.iter().enumerate() {
        let ys = pool_ranges(b.y1, b.y2, oh, h);
        let xs = pool_ranges(b.x1, b.x2, ow, w);
        for ch in 0..c {
            let base = ch * h * w;
            for (by, &(y0, y1)) in ys.iter().enumerate() {
                for (bx, &(x0, x1)) in xs.iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = base + y * w + x;
                            let v = features.data[idx];
                            if best.map_or(true, |(_, m)| v > m) {
                                best = Some((idx, v));
                            }
                        }
                    }
                    let o = (n * c + ch) * bins + by * ow + bx;
                    if let Some((idx, v)) = best {
                        data[o] = v;
                        argmax[o] = Some(idx);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![boxes.len(), c, oh, ow], data)?, argmax))
}

/// Quantized RoI max pooling: box edges and bin boundaries are rounded to
/// whole feature cells.
pub fn roi_pool(features: &Tensor, boxes: &[Box2D], out: (usize, usize)) -> Result<Tensor> {
    Ok(roi_pool_with_argmax(features, boxes, out)?.0)
}

pub fn roi_crop(op: RoiOp, features: &Tensor, boxes: &[Box2D], out: (usize, usize)) -> Result<Tensor> {
    match op {
        RoiOp::Align => roi_align(features, boxes, out),
        RoiOp::Pool => roi_pool(features, boxes, out),
    }
}

/// Fuse two `[N, C, ...]` crops: concat stacks channels, mean averages.
pub fn fuse(a: &Tensor, b: &Tensor, mode: FusionMode) -> Result<Tensor> {
    let [n, ca, s] = a.ncs()?;
    let [nb, cb, sb] = b.ncs()?;
    let mismatch = |detail: String| Error::ShapeMismatch { op: "fuse", detail };
    if n != nb || s != sb {
        return Err(mismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    match mode {
        FusionMode::Mean => {
            if a.shape != b.shape {
                return Err(mismatch(format!("mean needs equal shapes, {:?} vs {:?}", a.shape, b.shape)));
            }
            let data = a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect();
            Tensor::new(a.shape.clone(), data)
        }
        FusionMode::Concat => {
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for i in 0..n {
                data.extend_from_slice(&a.data[i * ca * s..(i + 1) * ca * s]);
                data.extend_from_slice(&b.data[i * cb * s..(i + 1) * cb * s]);
            }
            let mut shape = a.shape.clone();
            shape[1] = ca + cb;
            Tensor::new(shape, data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w)
            .map(|i| {
                let (ch, rem) = (i / (h * w), i % (h * w));
                (ch * 100) as f64 + 3.0 * (rem / w) as f64 + 0.5 * (rem % w) as f64
            })
            .collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn align_constant_map() {
        let f = Tensor::filled(vec![2, 6, 7], 1.25);
        let out = roi_align(&f, &[Box2D::new(0.3, 1.1, 5.2, 4.9)], (3, 3)).unwrap();
        assert_eq!(out.shape, vec![1, 2, 3, 3]);
        assert!(out.data.iter().all(|v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn align_integer_box_on_linear_map_indexes_cells() {
        let f = ramp(2, 8, 9);
        let out = roi_align(&f, &[Box2D::new(2.0, 3.0, 5.0, 5.0)], (2, 3)).unwrap();
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    let want = f.data[c * 72 + (3 + y) * 9 + 2 + x];
                    let got = out.data[c * 6 + y * 3 + x];
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn pool_hot_pixel_lands_in_one_bin() {
        let mut f = Tensor::zeros(vec![1, 8, 8]);
        f.data[3 * 8 + 5] = 7.0;
        let out = roi_pool(&f, &[Box2D::new(0.0, 0.0, 8.0, 8.0)], (4, 4)).unwrap();
        let hits: Vec<usize> = (0..16).filter(|&i| out.data[i] != 0.0).collect();
        assert_eq!(hits, vec![6]);
        assert_eq!(out.data[6], 7.0);
    }

    #[test]
    fn pool_constant_map() {
        let f = Tensor::filled(vec![1, 5, 5], -2.0);
        let out = roi_pool(&f, &[Box2D::new(0.6, 0.4, 3.7, 4.6)], (2, 2)).unwrap();
        assert!(out.data.iter().all(|v| *v == -2.0));
    }

    #[test]
    fn fuse_shapes() {
        let a = Tensor::filled(vec![2, 3, 2, 2], 1.0);
        let b = Tensor::filled(vec![2, 5, 2, 2], 3.0);
        assert_eq!(fuse(&a, &b, FusionMode::Concat).unwrap().shape, vec![2, 8, 2, 2]);
        assert!(fuse(&a, &b, FusionMode::Mean).is_err());
        let m = fuse(&a, &a, FusionMode::Mean).unwrap();
        assert_eq!(m, a);
    }
}
