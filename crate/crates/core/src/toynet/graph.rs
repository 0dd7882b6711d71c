//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the backward sweep simply walks
//! the tape in reverse. Every op checks its output for NaN/Inf and reports the
//! node name on failure.

use super::params::{ParamId, ParamStore};
use super::roi::roi_pool_with_argmax;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Box2D;

pub type NodeId = usize;

const GN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Concat(NodeId, NodeId),
    Mean2(NodeId, NodeId),
    Reshape(NodeId),
    RoiAlign {
        x: NodeId,
        boxes: Vec<Box2D>,
        out: (usize, usize),
    },
    RoiPool {
        x: NodeId,
        argmax: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    name: String,
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    /// Activation of the last node with the given name.
    pub fn activation(&self, name: &str) -> Option<&Tensor> {
        self.nodes.iter().rev().find(|n| n.name == name).map(|n| &n.value)
    }

    fn push(&mut self, name: impl Into<String>, value: Tensor, op: Op) -> Result<NodeId> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite { layer: name });
        }
        self.nodes.push(Node { name, value, op });
        Ok(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        self.push(name, value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let p = store.get(id);
        let value = Tensor::new(p.shape.clone(), p.data.clone())?;
        self.push(store.name(id).to_string(), value, Op::Param(id))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let [c, h, wd] = self.value(x).chw("conv2d")?;
        let ws = &self.value(w).shape;
        let (o, k) = match ws[..] {
            [o, ci, k, k2] if ci == c && k == k2 => (o, k),
            _ => return Err(mismatch("conv2d", format!("weight {ws:?} for input {c} channels"))),
        };
        if self.value(b).numel() != o || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", format!("bias/stride/size mismatch in {name}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let q = c * k * k;
        let xv = &self.value(x).data;
        let mut cols = vec![0.0; q * p];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xv[(ci * h + iy as usize) * wd..][..wd];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                row[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; o * p];
        for oc in 0..o {
            let dst = &mut out[oc * p..(oc + 1) * p];
            dst.fill(bv[oc]);
            for qi in 0..q {
                let wt = wv[oc * q + qi];
                if wt == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(&cols[qi * p..(qi + 1) * p]) {
                    *d += wt * s;
                }
            }
        }
        let value = Tensor::new(vec![o, ho, wo], out)?;
        self.push(
            name,
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn group_norm(&mut self, name: &str, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId> {
        let [c, h, w] = self.value(x).chw("group_norm")?;
        if groups == 0 || c % groups != 0 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(mismatch("group_norm", format!("{c} channels, {groups} groups in {name}")));
        }
        let per = c / groups * h * w;
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; xv.len()];
        for g in 0..groups {
            let seg = &xv[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd[g] = r;
            for (i, v) in seg.iter().enumerate() {
                let idx = g * per + i;
                xhat[idx] = (v - mean) * r;
                let ch = idx / (h * w);
                out[idx] = xhat[idx] * gv[ch] + bv[ch];
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        self.push(
            name,
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let value = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a.max(0.0)).collect())?;
        self.push(name, value, Op::Relu(x))
    }

    /// `[..., D] × W[O, D]ᵀ + b` over the last dimension.
    pub fn linear(&mut self, name: &str, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (&self.value(x).shape, &self.value(w).shape);
        let (o, d) = match (&ws[..], xs.last()) {
            (&[o, d], Some(&dx)) if d == dx => (o, d),
            _ => return Err(mismatch("linear", format!("input {xs:?}, weight {ws:?} in {name}"))),
        };
        if self.value(b).numel() != o {
            return Err(mismatch("linear", format!("bias length in {name}")));
        }
        let xv = &self.value(x).data;
        let (wv, bv) = (&self.value(w).data, &self.value(b).data);
        let n = xv.len() / d;
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            for oc in 0..o {
                out[i * o + oc] = bv[oc] + dot(row, &wv[oc * d..(oc + 1) * d]);
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = o;
        let value = Tensor::new(shape, out)?;
        self.push(name, value, Op::Linear { x, w, b })
    }

    /// 1×1 projection of `[N, C, ...]` with `W[O, C]`.
    pub fn pointwise(&mut self, name: &str, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, c, s] = self.value(x).ncs()?;
        let ws = &self.value(w).shape;
        let o = match ws[..] {
            [o, ci] if ci == c => o,
            _ => return Err(mismatch("pointwise", format!("weight {ws:?} for {c} channels in {name}"))),
        };
        if self.value(b).numel() != o {
            return Err(mismatch("pointwise", format!("bias length in {name}")));
        }
        let xv = &self.value(x).data;
        let (wv, bv) = (&self.value(w).data, &self.value(b).data);
        let mut out = vec![0.0; n * o * s];
        for i in 0..n {
            for oc in 0..o {
                let dst = &mut out[(i * o + oc) * s..][..s];
                dst.fill(bv[oc]);
                for ci in 0..c {
                    let wt = wv[oc * c + ci];
                    for (d, v) in dst.iter_mut().zip(&xv[(i * c + ci) * s..][..s]) {
                        *d += wt * v;
                    }
                }
            }
        }
        let mut shape = self.value(x).shape.clone();
        shape[1] = o;
        let value = Tensor::new(shape, out)?;
        self.push(name, value, Op::Pointwise { x, w, b })
    }

    /// Channel concatenation of `[N, C1, ...]` and `[N, C2, ...]`.
    pub fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = super::roi::fuse(self.value(a), self.value(b), super::roi::FusionMode::Concat)?;
        self.push(name, value, Op::Concat(a, b))
    }

    pub fn mean2(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = super::roi::fuse(self.value(a), self.value(b), super::roi::FusionMode::Mean)?;
        self.push(name, value, Op::Mean2(a, b))
    }

    pub fn reshape(&mut self, name: &str, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = Tensor::new(shape, self.value(x).data.clone())?;
        self.push(name, value, Op::Reshape(x))
    }

    pub fn roi_align(&mut self, name: &str, x: NodeId, boxes: &[Box2D], out: (usize, usize)) -> Result<NodeId> {
        let value = super::roi::roi_align(self.value(x), boxes, out)?;
        self.push(
            name,
            value,
            Op::RoiAlign {
                x,
                boxes: boxes.to_vec(),
                out,
            },
        )
    }

    pub fn roi_pool(&mut self, name: &str, x: NodeId, boxes: &[Box2D], out: (usize, usize)) -> Result<NodeId> {
        let (value, argmax) = roi_pool_with_argmax(self.value(x), boxes, out)?;
        self.push(name, value, Op::RoiPool { x, argmax })
    }

    /// Back-propagate the given output gradients and return the accumulated
    /// gradient of every parameter that appears on the tape.
    pub fn backward(&self, store: &ParamStore, seeds: &[(NodeId, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.len() != self.nodes[*id].value.numel() {
                return Err(mismatch(
                    "backward",
                    format!("seed for {} has {} values", self.nodes[*id].name, g.len()),
                ));
            }
            accumulate(&mut grads[*id], self.nodes[*id].value.numel(), |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
        }
        let mut out = store.zero_grads();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: format!("{} (gradient)", node.name),
                });
            }
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out[p.0].iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                Op::Relu(x) => {
                    let v = &node.value.data;
                    accumulate(&mut grads[*x], v.len(), |d| {
                        for i in 0..v.len() {
                            if v[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads[*x], g.len(), |d| d.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                }
                Op::Mean2(a, b) => {
                    for x in [a, b] {
                        accumulate(&mut grads[*x], g.len(), |d| {
                            d.iter_mut().zip(&g).for_each(|(a, b)| *a += 0.5 * b)
                        });
                    }
                }
                Op::Concat(a, b) => {
                    let [n, ca, s] = self.nodes[*a].value.ncs()?;
                    let cb = self.nodes[*b].value.ncs()?[1];
                    accumulate(&mut grads[*a], n * ca * s, |d| {
                        for i in 0..n {
                            let src = &g[i * (ca + cb) * s..][..ca * s];
                            d[i * ca * s..][..ca * s].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    accumulate(&mut grads[*b], n * cb * s, |d| {
                        for i in 0..n {
                            let src = &g[(i * (ca + cb) + ca) * s..][..cb * s];
                            d[i * cb * s..][..cb * s].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value.data;
                    let wv = &self.nodes[*w].value.data;
                    let [o, d] = [self.nodes[*w].value.shape[0], self.nodes[*w].value.shape[1]];
                    let n = xv.len() / d;
                    accumulate(&mut grads[*x], xv.len(), |dx| {
                        for i in 0..n {
                            let row = &mut dx[i * d..(i + 1) * d];
                            for oc in 0..o {
                                let go = g[i * o + oc];
                                if go != 0.0 {
                                    axpy(row, go, &wv[oc * d..(oc + 1) * d]);
                                }
                            }
                        }
                    });
                    accumulate(&mut grads[*w], wv.len(), |dw| {
                        for i in 0..n {
                            let row = &xv[i * d..(i + 1) * d];
                            for oc in 0..o {
                                let go = g[i * o + oc];
                                if go != 0.0 {
                                    axpy(&mut dw[oc * d..(oc + 1) * d], go, row);
                                }
                            }
                        }
                    });
                    accumulate(&mut grads[*b], o, |db| {
                        for i in 0..n {
                            db.iter_mut().zip(&g[i * o..(i + 1) * o]).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Pointwise { x, w, b } => {
                    let [n, c, s] = self.nodes[*x].value.ncs()?;
                    let xv = &self.nodes[*x].value.data;
                    let wv = &self.nodes[*w].value.data;
                    let o = self.nodes[*w].value.shape[0];
                    accumulate(&mut grads[*x], xv.len(), |dx| {
                        for i in 0..n {
                            for oc in 0..o {
                                let go = &g[(i * o + oc) * s..][..s];
                                for ci in 0..c {
                                    axpy(&mut dx[(i * c + ci) * s..][..s], wv[oc * c + ci], go);
                                }
                            }
                        }
                    });
                    accumulate(&mut grads[*w], wv.len(), |dw| {
                        for i in 0..n {
                            for oc in 0..o {
                                let go = &g[(i * o + oc) * s..][..s];
                                for ci in 0..c {
                                    dw[oc * c + ci] += dot(go, &xv[(i * c + ci) * s..][..s]);
                                }
                            }
                        }
                    });
                    accumulate(&mut grads[*b], o, |db| {
                        for i in 0..n {
                            for oc in 0..o {
                                db[oc] += g[(i * o + oc) * s..][..s].iter().sum::<f64>();
                            }
                        }
                    });
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let [c, h, wd] = self.nodes[*x].value.chw("conv2d")?;
                    let ws = &self.nodes[*w].value.shape;
                    let (o, k) = (ws[0], ws[2]);
                    let [_, ho, wo] = node.value.chw("conv2d")?;
                    let p = ho * wo;
                    let q = c * k * k;
                    let wv = &self.nodes[*w].value.data;
                    accumulate(&mut grads[*w], o * q, |dw| {
                        for oc in 0..o {
                            let go = &g[oc * p..(oc + 1) * p];
                            for qi in 0..q {
                                dw[oc * q + qi] += dot(go, &cols[qi * p..(qi + 1) * p]);
                            }
                        }
                    });
                    accumulate(&mut grads[*b], o, |db| {
                        for oc in 0..o {
                            db[oc] += g[oc * p..(oc + 1) * p].iter().sum::<f64>();
                        }
                    });
                    let mut dcols = vec![0.0; q * p];
                    for oc in 0..o {
                        let go = &g[oc * p..(oc + 1) * p];
                        for qi in 0..q {
                            let wt = wv[oc * q + qi];
                            if wt != 0.0 {
                                axpy(&mut dcols[qi * p..(qi + 1) * p], wt, go);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], c * h * wd, |dx| {
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let row = &dcols[((ci * k + ky) * k + kx) * p..][..p];
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let dst = &mut dx[(ci * h + iy as usize) * wd..][..wd];
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix >= 0 && ix < wd as isize {
                                                dst[ix as usize] += row[oy * wo + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let [c, h, w] = node.value.chw("group_norm")?;
                    let hw = h * w;
                    let gv = &self.nodes[*gamma].value.data;
                    accumulate(&mut grads[*gamma], c, |dg| {
                        for ch in 0..c {
                            dg[ch] += dot(&g[ch * hw..(ch + 1) * hw], &xhat[ch * hw..(ch + 1) * hw]);
                        }
                    });
                    accumulate(&mut grads[*beta], c, |db| {
                        for ch in 0..c {
                            db[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                        }
                    });
                    let per = c / groups * hw;
                    accumulate(&mut grads[*x], c * hw, |dx| {
                        for gi in 0..*groups {
                            let range = gi * per..(gi + 1) * per;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for i in range.clone() {
                                let dxh = g[i] * gv[i / hw];
                                s1 += dxh;
                                s2 += dxh * xhat[i];
                            }
                            let m = per as f64;
                            for i in range {
                                let dxh = g[i] * gv[i / hw];
                                dx[i] += rstd[gi] / m * (m * dxh - s1 - xhat[i] * s2);
                            }
                        }
                    });
                }
                Op::RoiAlign { x, boxes, out } => {
                    let shape = self.nodes[*x].value.chw("roi_align")?;
                    let n = self.nodes[*x].value.numel();
                    accumulate(&mut grads[*x], n, |dx| {
                        super::roi::roi_align_backward(shape, boxes, *out, &g, dx)
                    });
                }
                Op::RoiPool { x, argmax } => {
                    let n = self.nodes[*x].value.numel();
                    accumulate(&mut grads[*x], n, |dx| {
                        for (o, idx) in argmax.iter().enumerate() {
                            if let Some(i) = idx {
                                dx[*i] += g[o];
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}
