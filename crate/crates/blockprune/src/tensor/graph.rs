//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Nodes are evaluated eagerly when added, so the forward pass is the act of
//! building the graph; `backward` walks the tape once in reverse insertion
//! order (which is a reverse topological order by construction) and
//! accumulates gradients into per-node buffers. Gradients are only computed
//! along paths that reach a `requires_grad` leaf.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// An operation whose forward/backward pair lives outside this module.
/// Used to splice domain operators (differentiable top-k, block expansion)
/// into the tape without the engine knowing about them.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient w.r.t. each input, given the upstream gradient on the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor)
        -> Result<Vec<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Conv2d { pad: usize },
    Relu,
    Add,
    AddRowBias,
    AddChanBias,
    Mul,
    MeanPool,
    Flatten,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    WeightedSum { coeffs: Vec<f64> },
    Custom(Rc<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient buffer of a node, if backward reached it. A `requires_grad`
    /// leaf that is not on any path to the loss is never reached; its
    /// gradient is exactly zero and reported as `None`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of a node as a dense buffer, zeros when backward never
    /// reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[id].value.numel()],
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs_grad = value.requires_grad;
        self.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad })
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::Shape { op: format!("{op} (node {})", self.nodes.len()), detail }
    }

    fn add_op(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Node { op, inputs, value, needs_grad })
    }

    /// 2-d matrix product `(m,k)x(k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, kd, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let arow = &ad[i * kd..(i + 1) * kd];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &apv) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += apv * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.add_op(Op::Matmul, vec![a, b], value))
    }

    /// 2-d convolution, stride 1, zero padding. Input `(B,Ci,H,W)`,
    /// weight `(Co,Ci,Kh,Kw)`, output `(B,Co,H+2p-Kh+1,W+2p-Kw+1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(self.shape_err("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let (bsz, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let ho = (h + 2 * pad).checked_sub(kh - 1).filter(|&v| v >= 1);
        let wo = (wd + 2 * pad).checked_sub(kw - 1).filter(|&v| v >= 1);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(self.shape_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
                ))
            }
        };
        let value = conv2d_forward(xv, wv, pad, bsz, ci, h, wd, co, kh, kw, ho, wo)?;
        Ok(self.add_op(Op::Conv2d { pad }, vec![x, w], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.add_op(Op::Relu, vec![x], value)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(self.shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.add_op(Op::Add, vec![a, b], value))
    }

    /// `(R,C) + (C)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[b].value);
        let (sx, sb) = (xv.shape(), bv.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(self.shape_err("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let c = sx[1];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(e, &v)| v + bv.data()[e % c])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.add_op(Op::AddRowBias, vec![x, b], value))
    }

    /// `(B,C,H,W) + (C)` broadcast over batch and spatial dims.
    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[b].value);
        let (sx, sb) = (xv.shape(), bv.shape());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(self.shape_err("add_chan_bias", format!("{sx:?} + {sb:?}")));
        }
        let hw = sx[2] * sx[3];
        let c = sx[1];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(e, &v)| v + bv.data()[(e / hw) % c])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.add_op(Op::AddChanBias, vec![x, b], value))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(self.shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.add_op(Op::Mul, vec![a, b], value))
    }

    /// Global spatial mean: `(B,C,H,W) -> (B,C)`.
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let sx = xv.shape();
        if sx.len() != 4 {
            return Err(self.shape_err("mean_pool", format!("want 4-d input, got {sx:?}")));
        }
        let (bsz, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut out = vec![0.0; bsz * c];
        for (e, slot) in out.iter_mut().enumerate() {
            let base = e * hw;
            *slot = xv.data()[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::new(vec![bsz, c], out)?;
        Ok(self.add_op(Op::MeanPool, vec![x], value))
    }

    /// Collapse all trailing dims: `(d0, d1, ..) -> (d0, d1*..)`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let sx = xv.shape();
        if sx.is_empty() {
            return Err(self.shape_err("flatten", "scalar input".into()));
        }
        let rest: usize = sx[1..].iter().product();
        let value = Tensor::new(vec![sx[0], rest], xv.data().to_vec())?;
        Ok(self.add_op(Op::Flatten, vec![x], value))
    }

    /// Mean softmax cross-entropy over rows of `(B,C)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let sl = lv.shape();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("logits {sl:?} vs {} labels", labels.len()),
            ));
        }
        let (bsz, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let z = &lv.data()[row * c..(row + 1) * c];
            total += log_sum_exp(z) - z[label];
        }
        let value = Tensor::scalar(total / bsz as f64);
        Ok(self.add_op(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec() },
            vec![logits],
            value,
        ))
    }

    /// Fixed-coefficient contraction to a scalar. Gradient-check harnesses
    /// use it to turn any op output into a loss.
    pub fn weighted_sum(&mut self, x: NodeId, coeffs: Vec<f64>) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.numel() != coeffs.len() {
            return Err(self.shape_err(
                "weighted_sum",
                format!("{} elements vs {} coefficients", xv.numel(), coeffs.len()),
            ));
        }
        let v = xv.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        let value = Tensor::scalar(v);
        Ok(self.add_op(Op::WeightedSum { coeffs }, vec![x], value))
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = op.forward(&vals)?;
        Ok(self.add_op(Op::Custom(op), inputs.to_vec(), value))
    }

    /// Reverse pass from a scalar loss node. Visits each node at most once,
    /// in reverse insertion order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::State("backward already run on this graph".into()));
        }
        let ln = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::State(format!("backward on unknown node {loss}")))?;
        if !ln.value.is_scalar() {
            return Err(Error::State(format!(
                "backward needs a scalar loss, node {loss} has shape {:?}",
                ln.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let upstream = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let in_grads = self.input_grads(id, &upstream)?;
            let inputs = self.nodes[id].inputs.clone();
            for (slot, g) in inputs.into_iter().zip(in_grads) {
                if let Some(g) = g {
                    match &mut grads[slot] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        self.grads = grads;
        self.ran_backward = true;
        Ok(())
    }

    /// Gradients this node sends to each of its inputs (`None` when that
    /// input does not need one).
    fn input_grads(&self, id: NodeId, upstream: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[id];
        let need: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
        let val = |slot: usize| &self.nodes[node.inputs[slot]].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                let (m, kd, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = need[0].then(|| {
                    let mut g = vec![0.0; m * kd];
                    for i in 0..m {
                        let urow = &upstream[i * n..(i + 1) * n];
                        for p in 0..kd {
                            let brow = &b.data()[p * n..(p + 1) * n];
                            g[i * kd + p] =
                                urow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    g
                });
                let db = need[1].then(|| {
                    let mut g = vec![0.0; kd * n];
                    for i in 0..m {
                        let urow = &upstream[i * n..(i + 1) * n];
                        let arow = &a.data()[i * kd..(i + 1) * kd];
                        for (p, &apv) in arow.iter().enumerate() {
                            let grow = &mut g[p * n..(p + 1) * n];
                            for j in 0..n {
                                grow[j] += apv * urow[j];
                            }
                        }
                    }
                    g
                });
                vec![da, db]
            }
            Op::Conv2d { pad } => conv2d_backward(val(0), val(1), *pad, upstream, &need),
            Op::Relu => {
                let x = val(0);
                let g = need[0].then(|| {
                    x.data()
                        .iter()
                        .zip(upstream)
                        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                        .collect()
                });
                vec![g]
            }
            Op::Add => vec![
                need[0].then(|| upstream.to_vec()),
                need[1].then(|| upstream.to_vec()),
            ],
            Op::AddRowBias => {
                let c = val(1).numel();
                let db = need[1].then(|| {
                    let mut g = vec![0.0; c];
                    for (e, &u) in upstream.iter().enumerate() {
                        g[e % c] += u;
                    }
                    g
                });
                vec![need[0].then(|| upstream.to_vec()), db]
            }
            Op::AddChanBias => {
                let sx = val(0).shape();
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let db = need[1].then(|| {
                    let mut g = vec![0.0; c];
                    for (e, &u) in upstream.iter().enumerate() {
                        g[(e / hw) % c] += u;
                    }
                    g
                });
                vec![need[0].then(|| upstream.to_vec()), db]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    need[0]
                        .then(|| b.data().iter().zip(upstream).map(|(v, u)| v * u).collect()),
                    need[1]
                        .then(|| a.data().iter().zip(upstream).map(|(v, u)| v * u).collect()),
                ]
            }
            Op::MeanPool => {
                let sx = val(0).shape();
                let hw = sx[2] * sx[3];
                let g = need[0].then(|| {
                    let mut g = vec![0.0; val(0).numel()];
                    for (e, chunk) in g.chunks_mut(hw).enumerate() {
                        let u = upstream[e] / hw as f64;
                        chunk.fill(u);
                    }
                    g
                });
                vec![g]
            }
            Op::Flatten => vec![need[0].then(|| upstream.to_vec())],
            Op::SoftmaxCrossEntropy { labels } => {
                let lv = val(0);
                let c = lv.shape()[1];
                let bsz = labels.len();
                let g = need[0].then(|| {
                    let scale = upstream[0] / bsz as f64;
                    let mut g = vec![0.0; lv.numel()];
                    for (row, &label) in labels.iter().enumerate() {
                        let z = &lv.data()[row * c..(row + 1) * c];
                        let lse = log_sum_exp(z);
                        let grow = &mut g[row * c..(row + 1) * c];
                        for (j, &zj) in z.iter().enumerate() {
                            grow[j] = scale * (zj - lse).exp();
                        }
                        grow[label] -= scale;
                    }
                    g
                });
                vec![g]
            }
            Op::WeightedSum { coeffs } => {
                let u = upstream[0];
                vec![need[0].then(|| coeffs.iter().map(|&cv| cv * u).collect())]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let up = Tensor::new(node.value.shape().to_vec(), upstream.to_vec())?;
                let gs = op.backward(&inputs, &node.value, &up)?;
                if gs.len() != inputs.len() {
                    return Err(Error::State(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                gs.into_iter()
                    .zip(need)
                    .map(|(g, n)| n.then(|| g.data().to_vec()))
                    .collect()
            }
        })
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Valid output-column window for one kernel column: the `ow` range where
/// `iw = ow + fw - pad` stays inside `[0, wd)`, plus the matching input
/// offset of the window start. Empty range when the tap never lands inside.
fn col_window(fw: usize, pad: usize, wd: usize, wo: usize) -> (usize, usize, usize) {
    let lo = pad.saturating_sub(fw);
    let hi = (wd + pad - fw).min(wo);
    if lo >= hi {
        (0, 0, 0)
    } else {
        (lo, hi, lo + fw - pad)
    }
}

/// Shift-and-accumulate convolution: for each kernel tap, add a scaled,
/// shifted input row into the output row. Inner loops run over contiguous
/// slices.
#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    pad: usize,
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
) -> Result<Tensor> {
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; bsz * co * ho * wo];
    for b in 0..bsz {
        for oc in 0..co {
            let ybase = (b * co + oc) * ho * wo;
            for ic in 0..ci {
                let xbase = (b * ci + ic) * h * wd;
                let wbase = (oc * ci + ic) * kh * kw;
                for fh in 0..kh {
                    for fw in 0..kw {
                        let wv = wdat[wbase + fh * kw + fw];
                        if wv == 0.0 {
                            continue; // masked weights are exact zeros
                        }
                        let (ow_lo, ow_hi, iw_lo) = col_window(fw, pad, wd, wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        let oh_lo = pad.saturating_sub(fh);
                        let oh_hi = (h + pad - fh).min(ho);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + fh - pad;
                            let yrow = &mut out[ybase + oh * wo + ow_lo..][..len];
                            let xrow = &xd[xbase + ih * wd + iw_lo..][..len];
                            for (y, &xv) in yrow.iter_mut().zip(xrow) {
                                *y += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, co, ho, wo], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: usize,
    upstream: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (sx, sw) = (x.shape(), w.shape());
    let (bsz, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
    let ho = h + 2 * pad - kh + 1;
    let wo = wd + 2 * pad - kw + 1;
    let mut dx = need[0].then(|| vec![0.0; x.numel()]);
    let mut dw = need[1].then(|| vec![0.0; w.numel()]);
    for b in 0..bsz {
        for oc in 0..co {
            let ybase = (b * co + oc) * ho * wo;
            for ic in 0..ci {
                let xbase = (b * ci + ic) * h * wd;
                let wbase = (oc * ci + ic) * kh * kw;
                for fh in 0..kh {
                    for fw in 0..kw {
                        let (ow_lo, ow_hi, iw_lo) = col_window(fw, pad, wd, wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        let oh_lo = pad.saturating_sub(fh);
                        let oh_hi = (h + pad - fh).min(ho);
                        let wi = wbase + fh * kw + fw;
                        let wv = w.data()[wi];
                        let mut wacc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + fh - pad;
                            let urow = &upstream[ybase + oh * wo + ow_lo..][..len];
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx[xbase + ih * wd + iw_lo..][..len];
                                for (d, &u) in dxrow.iter_mut().zip(urow) {
                                    *d += wv * u;
                                }
                            }
                            if dw.is_some() {
                                let xrow = &x.data()[xbase + ih * wd + iw_lo..][..len];
                                for (&u, &xv) in urow.iter().zip(xrow) {
                                    wacc += u * xv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wi] += wacc;
                        }
                    }
                }
            }
        }
    }
    vec![dx, dw]
}
