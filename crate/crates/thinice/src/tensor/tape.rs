//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Operations are recorded eagerly into an arena; appending keeps the
//! nodes topologically sorted, so backward is a single reverse sweep that
//! visits each recorded operation exactly once. Forward dot products and
//! loss reductions accumulate in f64; storage stays f32.

use super::{check_finite, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

/// Surrogate losses understood by attacks and the mask search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Margin,
    Dlr,
}

enum Op {
    Leaf {
        requires_grad: bool,
    },
    MatMul(ValId, ValId),
    /// x: [m,n] plus bias [n], broadcast over rows.
    AddBias(ValId, ValId),
    /// x: [n,c,h,w] plus bias [c], broadcast over batch and positions.
    AddChanBias(ValId, ValId),
    Conv2d {
        x: ValId,
        k: ValId,
        stride: usize,
        pad: usize,
    },
    Relu(ValId),
    Reshape(ValId),
    SoftmaxCe {
        logits: ValId,
        labels: Vec<usize>,
    },
    /// Scalar adversarial gain on single-sample logits `[1, C]`; ascending
    /// this value always moves toward (targeted) misclassification.
    AttackGain {
        logits: ValId,
        kind: LossKind,
        label: usize,
        target: Option<usize>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    /// True if this node's value depends on some requires_grad leaf.
    on_grad_path: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, on_grad_path: bool) -> ValId {
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            on_grad_path,
        });
        ValId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: ValId) -> bool {
        self.nodes[id.0].on_grad_path
    }

    /// Register a tensor as a leaf. The tape owns a copy of the data.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> ValId {
        self.push(
            Op::Leaf { requires_grad },
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
        )
    }

    /// Forward value of any recorded node, as a fresh tensor.
    pub fn value(&self, id: ValId) -> Tensor {
        let n = self.node(id);
        Tensor::from_vec(&n.shape, n.data.clone()).expect("tape values stay valid")
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        &self.node(id).shape
    }

    /// Scalar value of a length-one node.
    pub fn scalar(&self, id: ValId) -> Result<f64> {
        let n = self.node(id);
        if n.data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0] as f64)
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += da[i * k + l] as f64 * db[l * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        check_finite(&out, "matmul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, needs))
    }

    pub fn add_bias(&mut self, x: ValId, bias: ValId) -> Result<ValId> {
        let (sx, sb) = (self.node(x).shape.clone(), self.node(bias).shape.clone());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("add_bias {sx:?} + {sb:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = self.node(x).data.clone();
        let db = &self.node(bias).data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += db[j];
            }
        }
        check_finite(&out, "add_bias")?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), sx, out, needs))
    }

    pub fn add_chan_bias(&mut self, x: ValId, bias: ValId) -> Result<ValId> {
        let (sx, sb) = (self.node(x).shape.clone(), self.node(bias).shape.clone());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "add_chan_bias {sx:?} + {sb:?}"
            )));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut out = self.node(x).data.clone();
        let db = &self.node(bias).data;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[base + p] += db[ci];
                }
            }
        }
        check_finite(&out, "add_chan_bias")?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddChanBias(x, bias), sx, out, needs))
    }

    /// Cross-correlation with zero padding over a batch `[n, c_in, h, w]`.
    pub fn conv2d(&mut self, x: ValId, k: ValId, stride: usize, pad: usize) -> Result<ValId> {
        let (sx, sk) = (self.node(x).shape.clone(), self.node(k).shape.clone());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::ShapeMismatch(format!("conv2d {sx:?} * {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d stride must be >= 1".into()));
        }
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kci, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if ci != kci {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channels: input {ci}, kernel {kci}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let dx = &self.node(x).data;
        let dk = &self.node(k).data;
        let mut out = vec![0.0f32; n * co * oh * ow];
        for ni in 0..n {
            for coi in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for cii in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = dx[((ni * ci + cii) * h + iy as usize) * w
                                        + ix as usize];
                                    let kv = dk[((coi * ci + cii) * kh + ky) * kw + kx];
                                    acc += xv as f64 * kv as f64;
                                }
                            }
                        }
                        out[((ni * co + coi) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        check_finite(&out, "conv2d")?;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(
            Op::Conv2d { x, k, stride, pad },
            vec![n, co, oh, ow],
            out,
            needs,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: ValId) -> ValId {
        let data: Vec<f32> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        self.push(Op::Relu(x), shape, data, needs)
    }

    pub fn reshape(&mut self, x: ValId, shape: &[usize]) -> Result<ValId> {
        let n: usize = shape.iter().product();
        if n != self.node(x).data.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} to {shape:?}",
                self.node(x).shape
            )));
        }
        let data = self.node(x).data.clone();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction and accumulated in f64.
    pub fn softmax_cross_entropy(&mut self, logits: ValId, labels: &[usize]) -> Result<ValId> {
        let s = self.node(logits).shape.clone();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("softmax_ce on {s:?}")));
        }
        let (m, c) = (s[0], s[1]);
        if m == 0 || labels.len() != m {
            return Err(Error::InvalidLabel(format!(
                "batch {m} vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidLabel(format!("label {bad} >= classes {c}")));
        }
        let d = &self.node(logits).data;
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse: f64 = row.iter().map(|&z| ((z as f64) - max).exp()).sum();
            total += -((row[y] as f64 - max) - lse.ln());
        }
        let loss = (total / m as f64) as f32;
        check_finite(&[loss], "softmax_cross_entropy")?;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    /// Scalar adversarial gain on `[1, C]` logits. Maximizing the returned
    /// value drives the sample toward misclassification (untargeted) or
    /// toward `target`:
    ///
    /// * `ce`      — cross-entropy on the true label (targeted: negated
    ///   cross-entropy on the target).
    /// * `margin`  — `max_{j != y} z_j - z_y` (targeted: `z_t - max_{j != t} z_j`).
    /// * `dlr`     — margin scaled by `1 / (z_(1) - z_(3))`, the gap between
    ///   the largest and third-largest logit; needs C >= 3.
    pub fn attack_gain(
        &mut self,
        logits: ValId,
        kind: LossKind,
        label: usize,
        target: Option<usize>,
    ) -> Result<ValId> {
        let s = self.node(logits).shape.clone();
        if s.len() != 2 || s[0] != 1 {
            return Err(Error::ShapeMismatch(format!("attack_gain on {s:?}")));
        }
        let c = s[1];
        if label >= c {
            return Err(Error::InvalidLabel(format!("label {label} >= classes {c}")));
        }
        if let Some(t) = target {
            if t >= c {
                return Err(Error::InvalidLabel(format!("target {t} >= classes {c}")));
            }
        }
        if kind == LossKind::Dlr && c < 3 {
            return Err(Error::Unsupported(format!(
                "dlr loss needs >= 3 classes, got {c}"
            )));
        }
        let z = &self.node(logits).data;
        let gain = gain_value(z, kind, label, target) as f32;
        check_finite(&[gain], "attack_gain")?;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::AttackGain {
                logits,
                kind,
                label,
                target,
            },
            vec![1],
            vec![gain],
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients land on every
    /// requires_grad leaf and are read back with [`Tape::grad`]. A second
    /// call without a fresh tape is an error.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice on the same tape".into(),
            ));
        }
        let n = self.node(loss);
        if n.data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].on_grad_path {
                continue;
            }
            self.propagate(idx)?;
        }
        Ok(())
    }

    fn take_out_grad(&self, idx: usize) -> Vec<f32> {
        self.nodes[idx].grad.clone().expect("checked by caller")
    }

    fn add_grad(&mut self, id: ValId, contrib: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let node = &mut self.nodes[id.0];
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0f32; node.data.len()]);
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi += c as f32;
        }
    }

    fn propagate(&mut self, idx: usize) -> Result<()> {
        let out_grad = self.take_out_grad(idx);
        // Split borrows by cloning the small metadata we need up front.
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.node(a).shape.clone();
                let sb = self.node(b).shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = self.node(a).data.clone();
                let db = self.node(b).data.clone();
                if self.needs(a) {
                    let mut ga = vec![0.0f64; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += out_grad[i * n + j] as f64 * db[l * n + j] as f64;
                            }
                            ga[i * k + l] = acc;
                        }
                    }
                    self.add_grad(a, &ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0f64; k * n];
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..m {
                                acc += da[i * k + l] as f64 * out_grad[i * n + j] as f64;
                            }
                            gb[l * n + j] = acc;
                        }
                    }
                    self.add_grad(b, &gb);
                }
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let s = self.node(x).shape.clone();
                let (m, n) = (s[0], s[1]);
                if self.needs(x) {
                    let gx: Vec<f64> = out_grad.iter().map(|&g| g as f64).collect();
                    self.add_grad(x, &gx);
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += out_grad[i * n + j] as f64;
                        }
                    }
                    self.add_grad(bias, &gb);
                }
            }
            Op::AddChanBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let s = self.node(x).shape.clone();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.needs(x) {
                    let gx: Vec<f64> = out_grad.iter().map(|&g| g as f64).collect();
                    self.add_grad(x, &gx);
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0f64; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                gb[ci] += out_grad[base + p] as f64;
                            }
                        }
                    }
                    self.add_grad(bias, &gb);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let sx = self.node(x).shape.clone();
                let sk = self.node(k).shape.clone();
                let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let dx = self.node(x).data.clone();
                let dk = self.node(k).data.clone();
                let mut gx = vec![0.0f64; dx.len()];
                let mut gk = vec![0.0f64; dk.len()];
                let (need_x, need_k) = (self.needs(x), self.needs(k));
                for ni in 0..n {
                    for coi in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = out_grad[((ni * co + coi) * oh + oy) * ow + ox] as f64;
                                if go == 0.0 {
                                    continue;
                                }
                                for cii in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((ni * ci + cii) * h + iy as usize) * w
                                                + ix as usize;
                                            let kidx = ((coi * ci + cii) * kh + ky) * kw + kx;
                                            if need_x {
                                                gx[xi] += go * dk[kidx] as f64;
                                            }
                                            if need_k {
                                                gk[kidx] += go * dx[xi] as f64;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.add_grad(x, &gx);
                }
                if need_k {
                    self.add_grad(k, &gk);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let gx: Vec<f64> = self
                    .node(x)
                    .data
                    .iter()
                    .zip(&out_grad)
                    .map(|(&v, &g)| if v > 0.0 { g as f64 } else { 0.0 })
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::Reshape(x) => {
                let x = *x;
                let gx: Vec<f64> = out_grad.iter().map(|&g| g as f64).collect();
                self.add_grad(x, &gx);
            }
            Op::SoftmaxCe { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let s = self.node(logits).shape.clone();
                let (m, c) = (s[0], s[1]);
                let d = self.node(logits).data.clone();
                let g = out_grad[0] as f64 / m as f64;
                let mut gl = vec![0.0f64; m * c];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &d[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let exps: Vec<f64> = row.iter().map(|&z| ((z as f64) - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..c {
                        let soft = exps[j] / sum;
                        gl[i * c + j] = g * (soft - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.add_grad(logits, &gl);
            }
            Op::AttackGain {
                logits,
                kind,
                label,
                target,
            } => {
                let (logits, kind, label, target) = (*logits, *kind, *label, *target);
                let z = self.node(logits).data.clone();
                let mut gl = gain_grad(&z, kind, label, target);
                for g in gl.iter_mut() {
                    *g *= out_grad[0] as f64;
                }
                self.add_grad(logits, &gl);
            }
        }
        Ok(())
    }

    /// Gradient of the loss with respect to a requires_grad leaf.
    pub fn grad(&self, id: ValId) -> Result<Tensor> {
        if !self.backward_done {
            return Err(Error::Autodiff("grad requested before backward".into()));
        }
        let n = self.node(id);
        match n.op {
            Op::Leaf {
                requires_grad: true,
            } => {
                let g = n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()]);
                check_finite(&g, "gradient")?;
                Tensor::from_vec(&n.shape, g)
            }
            Op::Leaf { .. } => Err(Error::Autodiff(
                "grad requested on a leaf without requires_grad".into(),
            )),
            _ => Err(Error::Autodiff(
                "grad is only tracked on leaves; interior nodes are not retained".into(),
            )),
        }
    }
}

/// Largest logit among `j != excluded`, ties toward the smaller index.
fn runner_up(z: &[f32], excluded: usize) -> usize {
    let mut best = usize::MAX;
    for j in 0..z.len() {
        if j == excluded {
            continue;
        }
        if best == usize::MAX || z[j] > z[best] {
            best = j;
        }
    }
    best
}

/// Indices of the largest and third-largest logits under a stable
/// (value desc, index asc) order.
fn order_stat_indices(z: &[f32]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
    (idx[0], idx[2])
}

const DLR_DENOM_FLOOR: f64 = 1e-12;

fn gain_value(z: &[f32], kind: LossKind, label: usize, target: Option<usize>) -> f64 {
    match (kind, target) {
        (LossKind::Ce, None) => {
            let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse: f64 = z.iter().map(|&v| ((v as f64) - max).exp()).sum();
            -((z[label] as f64 - max) - lse.ln())
        }
        (LossKind::Ce, Some(t)) => {
            let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse: f64 = z.iter().map(|&v| ((v as f64) - max).exp()).sum();
            (z[t] as f64 - max) - lse.ln()
        }
        (LossKind::Margin, None) => {
            let m = runner_up(z, label);
            z[m] as f64 - z[label] as f64
        }
        (LossKind::Margin, Some(t)) => {
            let m = runner_up(z, t);
            z[t] as f64 - z[m] as f64
        }
        (LossKind::Dlr, tgt) => {
            let (i1, i3) = order_stat_indices(z);
            let denom = (z[i1] as f64 - z[i3] as f64).max(DLR_DENOM_FLOOR);
            let num = match tgt {
                None => {
                    let m = runner_up(z, label);
                    z[m] as f64 - z[label] as f64
                }
                Some(t) => z[t] as f64 - z[label] as f64,
            };
            num / denom
        }
    }
}

fn gain_grad(z: &[f32], kind: LossKind, label: usize, target: Option<usize>) -> Vec<f64> {
    let c = z.len();
    let mut g = vec![0.0f64; c];
    match (kind, target) {
        (LossKind::Ce, None) => {
            let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = z.iter().map(|&v| ((v as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..c {
                g[j] = exps[j] / sum - if j == label { 1.0 } else { 0.0 };
            }
        }
        (LossKind::Ce, Some(t)) => {
            let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = z.iter().map(|&v| ((v as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..c {
                g[j] = (if j == t { 1.0 } else { 0.0 }) - exps[j] / sum;
            }
        }
        (LossKind::Margin, None) => {
            let m = runner_up(z, label);
            g[m] += 1.0;
            g[label] -= 1.0;
        }
        (LossKind::Margin, Some(t)) => {
            let m = runner_up(z, t);
            g[t] += 1.0;
            g[m] -= 1.0;
        }
        (LossKind::Dlr, tgt) => {
            let (i1, i3) = order_stat_indices(z);
            let raw = z[i1] as f64 - z[i3] as f64;
            let denom = raw.max(DLR_DENOM_FLOOR);
            let clamped = raw < DLR_DENOM_FLOOR;
            let (num, num_grad): (f64, Vec<(usize, f64)>) = match tgt {
                None => {
                    let m = runner_up(z, label);
                    (
                        z[m] as f64 - z[label] as f64,
                        vec![(m, 1.0), (label, -1.0)],
                    )
                }
                Some(t) => (
                    z[t] as f64 - z[label] as f64,
                    vec![(t, 1.0), (label, -1.0)],
                ),
            };
            for (j, v) in num_grad {
                g[j] += v / denom;
            }
            if !clamped {
                g[i1] -= num / (denom * denom);
                g[i3] += num / (denom * denom);
            }
        }
    }
    g
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. Black-box in `f`; this is the independent oracle that
/// the tape's backward pass is checked against.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::InvalidShape(format!("finite-diff step {h} <= 0")));
    }
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        // Divide by the step that is actually representable in f32 around
        // `orig`, not the nominal one; this removes quantization bias.
        let xp = orig + h as f32;
        let xm = orig - h as f32;
        let denom = xp as f64 - xm as f64;
        if denom == 0.0 {
            return Err(Error::Numeric(format!(
                "finite-diff step {h} underflows at coordinate {i}"
            )));
        }
        probe.data_mut()[i] = xp;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xm;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = ((fp - fm) / denom) as f32;
    }
    check_finite(&grad, "finite_diff_gradient")?;
    Tensor::from_vec(x.shape(), grad)
}

// Convenience single-shot wrappers over a throwaway tape; these are the
// plain (no-grad) versions of the recorded operations.

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let ia = t.leaf(a, false);
    let ib = t.leaf(b, false);
    let out = t.matmul(ia, ib)?;
    Ok(t.value(out))
}

/// Single-sample convolution `[c_in, h, w] * [c_out, c_in, kh, kw]`.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input must be [c,h,w], got {:?}",
            x.shape()
        )));
    }
    let mut batched_shape = vec![1];
    batched_shape.extend_from_slice(x.shape());
    let xb = x.reshaped(&batched_shape)?;
    let mut t = Tape::new();
    let ix = t.leaf(&xb, false);
    let ik = t.leaf(kernels, false);
    let out = t.conv2d(ix, ik, stride, pad)?;
    let v = t.value(out);
    let single: Vec<usize> = v.shape()[1..].to_vec();
    v.reshaped(&single)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0)).expect("relu keeps finiteness")
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut t = Tape::new();
    let il = t.leaf(logits, false);
    let out = t.softmax_cross_entropy(il, labels)?;
    t.scalar(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    /// Reference triple-loop matmul used as the independent oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += a.data()[i * k + l] as f64 * b.data()[l * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        let out = matmul(&i2, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] . [[5],[6]] = [[17],[39]], checked against the
        // triple-loop oracle as well.
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
        assert_eq!(out.data(), matmul_oracle(&a, &b).as_slice());
    }

    #[test]
    fn matmul_matches_oracle_on_random_inputs() {
        for seed in 0..10u64 {
            let a = Tensor::normal(&[3, 5], 0.0, 1.0, seed).unwrap();
            let b = Tensor::normal(&[5, 4], 0.0, 1.0, seed + 100).unwrap();
            let out = matmul(&a, &b).unwrap();
            assert_eq!(out.data(), matmul_oracle(&a, &b).as_slice());
        }
    }

    #[test]
    fn matmul_transpose_identity() {
        // (A.B)^T == B^T . A^T on seeded inputs.
        let transpose = |t: &Tensor| {
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t.data()[i * n + j];
                }
            }
            Tensor::from_vec(&[n, m], out).unwrap()
        };
        for seed in 0..5u64 {
            let a = Tensor::normal(&[3, 4], 0.0, 1.0, seed).unwrap();
            let b = Tensor::normal(&[4, 2], 0.0, 1.0, seed + 50).unwrap();
            let ab_t = transpose(&matmul(&a, &b).unwrap());
            let bt_at = matmul(&transpose(&b), &transpose(&a)).unwrap();
            assert_eq!(ab_t.to_bits(), bt_at.to_bits());
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::normal(&[1, 4, 4], 0.0, 1.0, 9).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv2d_hand_dot_product() {
        // x=[[1,2],[3,4]], kernel=[[1,0],[0,1]], valid conv -> [[5]]
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = Tensor::normal(&[2, 3, 3], 0.0, 1.0, 4).unwrap();
        let k = Tensor::zeros(&[3, 2, 2, 2]).unwrap();
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        let k = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        assert!(matches!(
            conv2d(&x, &k, 1, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv2d_output_size_with_stride_and_pad() {
        let x = Tensor::normal(&[1, 6, 6], 0.0, 1.0, 2).unwrap();
        let k = Tensor::normal(&[8, 1, 3, 3], 0.0, 1.0, 3).unwrap();
        let out = conv2d(&x, &k, 2, 1).unwrap();
        // h' = floor((6 + 2 - 3)/2) + 1 = 3
        assert_eq!(out.shape(), &[8, 3, 3]);
    }

    #[test]
    fn relu_definition_and_idempotence() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&y).data(), y.data());
    }

    #[test]
    fn relu_gradient_is_positive_indicator() {
        let x = Tensor::from_vec(&[1, 4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        let w = Tensor::from_vec(&[4, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let ix = t.leaf(&x, true);
        let r = t.relu(ix);
        let iw = t.leaf(&w, false);
        let s = t.matmul(r, iw).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(ix).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Tensor::zeros(&[1, 10]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_hand_case() {
        // logits [1,2], label 0 -> -ln(e/(e + e^2)) = ln(1 + e)
        let logits = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - (1.0 + std::f64::consts::E).ln()).abs() < 1e-6);
        assert!((loss - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_saturation() {
        let mut data = vec![0.0f32; 10];
        data[7] = 1000.0;
        let logits = Tensor::from_vec(&[1, 10], data).unwrap();
        let loss = softmax_cross_entropy(&logits, &[7]).unwrap();
        assert!(loss < 1e-6);
        assert!(loss >= 0.0);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn backward_square_function() {
        // f(x) = x*x at x=3 -> df/dx = 6
        let x = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let mut t = Tape::new();
        let ix = t.leaf(&x, true);
        let y = t.matmul(ix, ix).unwrap();
        t.backward(y).unwrap();
        let g = t.grad(ix).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn backward_softmax_ce_closed_form() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.3, -0.7, 1.1, 0.0, 0.2, -0.5]).unwrap();
        let labels = [2usize, 0];
        let mut t = Tape::new();
        let il = t.leaf(&logits, true);
        let loss = t.softmax_cross_entropy(il, &labels).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(il).unwrap();
        // closed form: (softmax - onehot) / batch
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * 3..(i + 1) * 3];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&z| ((z as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                let want = (exps[j] / sum - if j == y { 1.0 } else { 0.0 }) / 2.0;
                assert!((g.data()[i * 3 + j] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_twice_is_error() {
        let x = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let mut t = Tape::new();
        let ix = t.leaf(&x, true);
        let y = t.matmul(ix, ix).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn backward_non_scalar_is_error() {
        let x = Tensor::zeros(&[2, 2]).unwrap();
        let mut t = Tape::new();
        let ix = t.leaf(&x, true);
        assert!(matches!(t.backward(ix), Err(Error::Autodiff(_))));
    }

    #[test]
    fn finite_diff_linear_function() {
        let x = Tensor::normal(&[5], 0.0, 1.0, 11).unwrap();
        let g = finite_diff_gradient(
            |t| Ok(t.data().iter().map(|&v| v as f64).sum()),
            &x,
            1e-3,
        )
        .unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_gradient(
            |t| {
                let v = t.data()[0] as f64;
                Ok(v * v)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-5);
    }

    /// Vector-relative agreement between backward and central differences.
    fn grad_check_two_layer(seed: u64) -> f64 {
        let w1 = Tensor::normal(&[4, 8], 0.0, 0.5, seed).unwrap();
        let b1 = Tensor::zeros(&[8]).unwrap();
        let w2 = Tensor::normal(&[8, 3], 0.0, 0.5, seed + 1).unwrap();
        let b2 = Tensor::zeros(&[3]).unwrap();
        let x = Tensor::normal(&[2, 4], 0.0, 1.0, seed + 2).unwrap();
        let labels = [1usize, 2];

        let run = |input: &Tensor| -> Result<f64> {
            let mut t = Tape::new();
            let ix = t.leaf(input, false);
            let iw1 = t.leaf(&w1, false);
            let ib1 = t.leaf(&b1, false);
            let iw2 = t.leaf(&w2, false);
            let ib2 = t.leaf(&b2, false);
            let h = t.matmul(ix, iw1)?;
            let h = t.add_bias(h, ib1)?;
            let h = t.relu(h);
            let o = t.matmul(h, iw2)?;
            let o = t.add_bias(o, ib2)?;
            let l = t.softmax_cross_entropy(o, &labels)?;
            t.scalar(l)
        };

        let mut t = Tape::new();
        let ix = t.leaf(&x, true);
        let iw1 = t.leaf(&w1, false);
        let ib1 = t.leaf(&b1, false);
        let iw2 = t.leaf(&w2, false);
        let ib2 = t.leaf(&b2, false);
        let h = t.matmul(ix, iw1).unwrap();
        let h = t.add_bias(h, ib1).unwrap();
        let h = t.relu(h);
        let o = t.matmul(h, iw2).unwrap();
        let o = t.add_bias(o, ib2).unwrap();
        let l = t.softmax_cross_entropy(o, &labels).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(ix).unwrap();
        let fd = finite_diff_gradient(run, &x, 1e-3).unwrap();

        let num: f64 = g
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, b)| ((*a - *b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-8);
        num / den
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20u64 {
            let rel = grad_check_two_layer(3 * seed + 1000);
            assert!(rel < 1e-3, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn attack_gain_margin_and_dlr() {
        let logits = Tensor::from_vec(&[1, 3], vec![3.0, 2.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let il = t.leaf(&logits, false);
        let m = t.attack_gain(il, LossKind::Margin, 0, None).unwrap();
        // margin gain = max_{j!=0} z_j - z_0 = 2 - 3 = -1
        assert!((t.scalar(m).unwrap() + 1.0).abs() < 1e-6);
        let d = t.attack_gain(il, LossKind::Dlr, 0, None).unwrap();
        // dlr = -(3-2)/(3-1) = -0.5
        assert!((t.scalar(d).unwrap() + 0.5).abs() < 1e-6);
    }

    #[test]
    fn attack_gain_dlr_needs_three_classes() {
        let logits = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let il = t.leaf(&logits, false);
        assert!(matches!(
            t.attack_gain(il, LossKind::Dlr, 0, None),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn attack_gain_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(77);
        for case in 0..30 {
            let c = 3 + (case % 3);
            let label = case % c;
            let target = if case % 2 == 0 { Some((label + 1) % c) } else { None };
            let kinds = [LossKind::Ce, LossKind::Margin, LossKind::Dlr];
            let kind = kinds[case % 3];
            let logits = Tensor::from_vec(
                &[1, c],
                (0..c).map(|_| rng.random_range(-2.0..2.0f32)).collect(),
            )
            .unwrap();
            // skip near-kink logit configurations (order-statistic ties)
            let mut sorted: Vec<f32> = logits.data().to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-2) {
                continue;
            }
            let mut t = Tape::new();
            let il = t.leaf(&logits, true);
            let gain = t.attack_gain(il, kind, label, target).unwrap();
            t.backward(gain).unwrap();
            let g = t.grad(il).unwrap();
            let fd = finite_diff_gradient(
                |probe| {
                    let mut t2 = Tape::new();
                    let ip = t2.leaf(probe, false);
                    let gn = t2.attack_gain(ip, kind, label, target)?;
                    t2.scalar(gn)
                },
                &logits,
                1e-3,
            )
            .unwrap();
            for (a, b) in g.data().iter().zip(fd.data()) {
                assert!(
                    (a - b).abs() < 1e-3,
                    "case {case} kind {kind:?}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn nan_raises_numeric_error() {
        // overflow to inf inside matmul must not escape
        let a = Tensor::constant(&[1, 2], f32::MAX).unwrap();
        let b = Tensor::constant(&[2, 1], f32::MAX).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Numeric(_))));
    }
}
