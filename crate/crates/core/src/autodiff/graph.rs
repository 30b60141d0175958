//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every node that requires one. Nodes whose inputs are all
//! gradient-free are never visited, so frozen sub-networks cost nothing on
//! the backward pass.

use super::kernels::{self, ConvGeom, Taps};
use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis-aligned region to crop, in input-image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    /// Index into the batch dimension.
    pub batch: usize,
    /// Index into the list of feature maps passed to the op.
    pub level: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// Every differentiable operation the tape understands, with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// inputs: x `[n,c,h,w]`, weight `[o,c,kh,kw]`, optional bias `[o]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// inputs: x `[n,c,...]`, gamma `[c]`, beta `[c]`.
    GroupNorm {
        groups: usize,
        eps: f32,
    },
    Relu,
    /// inputs: x `[n,in]`, weight `[out,in]`, optional bias `[out]`.
    Linear,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    NearestUpsample {
        factor: usize,
    },
    /// Transposed 2×2 convolution with stride 2 (exact 2× upsampling).
    /// inputs: x `[n,c,h,w]`, weight `[c,o,2,2]`, optional bias `[o]`.
    UpConv2x2,
    Add,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
    /// Weighted sum of per-row `-log softmax(logits)[target]`; input `[r,k]`.
    CrossEntropy {
        targets: Vec<usize>,
        weights: Vec<f32>,
    },
    /// Weighted sum of elementwise Huber-style losses against `targets`.
    SmoothL1 {
        targets: Vec<f32>,
        weights: Vec<f32>,
        beta: f32,
    },
    /// Weighted sum of elementwise binary cross-entropy on logits.
    BinaryCrossEntropy {
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
    /// Bilinear crop of each box to an `output_size²` grid. Inputs are one
    /// feature map per level; `spatial_scales[l]` maps image pixels to level `l`.
    RoiCropResize {
        rois: Vec<RoiBox>,
        output_size: usize,
        spatial_scales: Vec<f32>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Sum,
    Scale {
        factor: f32,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::Relu => "relu",
            OpKind::Linear => "linear",
            OpKind::MaxPool { .. } => "max_pool",
            OpKind::NearestUpsample { .. } => "nearest_upsample",
            OpKind::UpConv2x2 => "upconv2x2",
            OpKind::Add => "add",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::SmoothL1 { .. } => "smooth_l1",
            OpKind::BinaryCrossEntropy { .. } => "binary_cross_entropy",
            OpKind::RoiCropResize { .. } => "roi_crop_resize",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Sum => "sum",
            OpKind::Scale { .. } => "scale",
        }
    }
}

enum Cache {
    None,
    Cols(Vec<f32>),
    Norm { xhat: Vec<f32>, rstd: Vec<f32> },
    Argmax(Vec<u32>),
    Probs(Vec<f32>),
}

struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    cache: Cache,
    requires_grad: bool,
    param: Option<usize>,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch { op: op.to_string(), detail: detail.into() }
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

    fn push(&mut self, value: Tensor, kind: Option<OpKind>, inputs: Vec<Var>, cache: Cache) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, kind, inputs, cache, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or user-supplied leaf; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        value.clear_grad();
        self.nodes.push(Node { value, kind: None, inputs: Vec::new(), cache: Cache::None, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Records parameter `index` of some external store. Frozen parameters
    /// (`trainable == false`) enter the tape as constants.
    pub fn param(&mut self, index: usize, value: &Tensor, trainable: bool) -> Var {
        let v = self.leaf(value.clone().with_requires_grad(trainable));
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `(external parameter index, gradient)` for every parameter leaf that
    /// received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.nodes.iter().filter_map(|n| match (n.param, n.value.grad()) {
            (Some(i), Some(g)) if n.requires_grad => Some((i, g)),
            _ => None,
        })
    }

    // ---- convenience wrappers -------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.forward_op(OpKind::Conv2d { stride, padding }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::GroupNorm { groups, eps }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.forward_op(OpKind::Linear, &inputs)
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::MaxPool { kernel, stride, padding }, &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::NearestUpsample { factor }, &[x])
    }

    pub fn upconv2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.forward_op(OpKind::UpConv2x2, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Softmax, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Reshape { shape: shape.into() }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Sum, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Scale { factor }, &[x])
    }

    /// Sums a list of scalars; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var, AutodiffError> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    // ---- forward --------------------------------------------------------

    /// Applies `kind` to `inputs`, recording the result for backward.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let name = kind.name();
        let arity_ok = match &kind {
            OpKind::Conv2d { .. } | OpKind::Linear | OpKind::UpConv2x2 => (2..=3).contains(&inputs.len()),
            OpKind::GroupNorm { .. } => inputs.len() == 3,
            OpKind::Add => inputs.len() == 2,
            OpKind::RoiCropResize { spatial_scales, .. } => !inputs.is_empty() && inputs.len() == spatial_scales.len(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(mismatch(name, format!("unexpected input count {}", inputs.len())));
        }
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.shape(*v).to_vec()).collect();
        let (value, cache) = match &kind {
            OpKind::Conv2d { stride, padding } => {
                let (xs, ws) = (&shapes[0], &shapes[1]);
                if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
                    return Err(mismatch(name, format!("input {xs:?} vs weight {ws:?}")));
                }
                if let Some(bs) = shapes.get(2) {
                    if bs.as_slice() != [ws[0]] {
                        return Err(mismatch(name, format!("bias {bs:?} vs {} output channels", ws[0])));
                    }
                }
                let g = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], *stride, *padding)
                    .ok_or_else(|| mismatch(name, format!("kernel {ws:?} larger than padded input {xs:?}")))?;
                let bias = inputs.get(2).map(|b| self.value(*b).data());
                let (out, cols) = kernels::conv2d_forward(self.value(inputs[0]).data(), xs[0], &g, self.value(inputs[1]).data(), ws[0], bias);
                (Tensor::new([xs[0], ws[0], g.oh, g.ow], out), Cache::Cols(cols))
            }
            OpKind::GroupNorm { groups, eps } => {
                let xs = &shapes[0];
                if xs.len() < 2 || *groups == 0 || !xs[1].is_multiple_of(*groups) {
                    return Err(mismatch(name, format!("input {xs:?} with {groups} groups")));
                }
                if shapes[1].as_slice() != [xs[1]] || shapes[2].as_slice() != [xs[1]] {
                    return Err(mismatch(name, format!("affine {:?}/{:?} vs {} channels", shapes[1], shapes[2], xs[1])));
                }
                let spatial: usize = xs[2..].iter().product();
                let (y, xhat, rstd) = kernels::group_norm_forward(
                    self.value(inputs[0]).data(),
                    xs[0],
                    xs[1],
                    spatial,
                    *groups,
                    *eps,
                    self.value(inputs[1]).data(),
                    self.value(inputs[2]).data(),
                );
                (Tensor::new(xs.clone(), y), Cache::Norm { xhat, rstd })
            }
            OpKind::Relu => {
                let y = self.value(inputs[0]).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                (Tensor::new(shapes[0].clone(), y), Cache::None)
            }
            OpKind::Linear => {
                let (xs, ws) = (&shapes[0], &shapes[1]);
                if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
                    return Err(mismatch(name, format!("input {xs:?} vs weight {ws:?}")));
                }
                if let Some(bs) = shapes.get(2) {
                    if bs.as_slice() != [ws[0]] {
                        return Err(mismatch(name, format!("bias {bs:?} vs {} outputs", ws[0])));
                    }
                }
                let (n, out) = (xs[0], ws[0]);
                let mut y = vec![0.0f32; n * out];
                let beta = match inputs.get(2) {
                    Some(b) => {
                        let b = self.value(*b).data();
                        y.chunks_mut(out).for_each(|row| row.copy_from_slice(b));
                        1.0
                    }
                    None => 0.0,
                };
                kernels::gemm(n, xs[1], out, self.value(inputs[0]).data(), false, self.value(inputs[1]).data(), true, &mut y, beta);
                (Tensor::new([n, out], y), Cache::None)
            }
            OpKind::MaxPool { kernel, stride, padding } => {
                let xs = &shapes[0];
                if xs.len() != 4 || *kernel == 0 || *stride == 0 || xs[2] + 2 * padding < *kernel || xs[3] + 2 * padding < *kernel {
                    return Err(mismatch(name, format!("input {xs:?} kernel {kernel} stride {stride}")));
                }
                let oh = (xs[2] + 2 * padding - kernel) / stride + 1;
                let ow = (xs[3] + 2 * padding - kernel) / stride + 1;
                let (y, arg) =
                    kernels::max_pool_forward(self.value(inputs[0]).data(), xs[0] * xs[1], xs[2], xs[3], *kernel, *stride, *padding, oh, ow);
                (Tensor::new([xs[0], xs[1], oh, ow], y), Cache::Argmax(arg))
            }
            OpKind::NearestUpsample { factor } => {
                let xs = &shapes[0];
                if xs.len() != 4 || *factor == 0 {
                    return Err(mismatch(name, format!("input {xs:?} factor {factor}")));
                }
                let (h, w, f) = (xs[2], xs[3], *factor);
                let x = self.value(inputs[0]).data();
                let mut y = vec![0.0f32; x.len() * f * f];
                for p in 0..xs[0] * xs[1] {
                    for oy in 0..h * f {
                        for ox in 0..w * f {
                            y[p * h * w * f * f + oy * w * f + ox] = x[p * h * w + (oy / f) * w + ox / f];
                        }
                    }
                }
                (Tensor::new([xs[0], xs[1], h * f, w * f], y), Cache::None)
            }
            OpKind::UpConv2x2 => {
                let (xs, ws) = (&shapes[0], &shapes[1]);
                if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
                    return Err(mismatch(name, format!("input {xs:?} vs weight {ws:?}")));
                }
                if let Some(bs) = shapes.get(2) {
                    if bs.as_slice() != [ws[1]] {
                        return Err(mismatch(name, format!("bias {bs:?} vs {} output channels", ws[1])));
                    }
                }
                let (n, c, h, w, o) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
                let hw = h * w;
                let x = self.value(inputs[0]).data();
                let wt = self.value(inputs[1]).data();
                let bias = inputs.get(2).map(|b| self.value(*b).data());
                let mut y = vec![0.0f32; n * o * 4 * hw];
                let mut tmp = vec![0.0f32; o * 4 * hw];
                for b in 0..n {
                    kernels::gemm(o * 4, c, hw, wt, true, &x[b * c * hw..(b + 1) * c * hw], false, &mut tmp, 0.0);
                    let yb = &mut y[b * o * 4 * hw..(b + 1) * o * 4 * hw];
                    for oc in 0..o {
                        let bv = bias.map_or(0.0, |bb| bb[oc]);
                        for k in 0..4 {
                            let (a, bb) = (k / 2, k % 2);
                            let src = &tmp[(oc * 4 + k) * hw..(oc * 4 + k + 1) * hw];
                            for i in 0..h {
                                for j in 0..w {
                                    yb[oc * 4 * hw + (2 * i + a) * 2 * w + 2 * j + bb] = src[i * w + j] + bv;
                                }
                            }
                        }
                    }
                }
                (Tensor::new([n, o, 2 * h, 2 * w], y), Cache::None)
            }
            OpKind::Add => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(name, format!("{:?} + {:?}", shapes[0], shapes[1])));
                }
                let y = self.value(inputs[0]).data().iter().zip(self.value(inputs[1]).data()).map(|(a, b)| a + b).collect();
                (Tensor::new(shapes[0].clone(), y), Cache::None)
            }
            OpKind::Sigmoid => {
                let y = self.value(inputs[0]).data().iter().map(|&v| sigmoid(v)).collect();
                (Tensor::new(shapes[0].clone(), y), Cache::None)
            }
            OpKind::Softmax => {
                let xs = &shapes[0];
                let k = *xs.last().ok_or_else(|| mismatch(name, "scalar input"))?;
                let mut y = self.value(inputs[0]).data().to_vec();
                if k > 0 {
                    y.chunks_mut(k).for_each(softmax_in_place);
                }
                (Tensor::new(xs.clone(), y), Cache::None)
            }
            OpKind::CrossEntropy { targets, weights } => {
                let xs = &shapes[0];
                if xs.len() != 2 || targets.len() != xs[0] || weights.len() != xs[0] || targets.iter().any(|&t| t >= xs[1]) {
                    return Err(mismatch(name, format!("logits {xs:?}, {} targets, {} weights", targets.len(), weights.len())));
                }
                let k = xs[1];
                let mut probs = self.value(inputs[0]).data().to_vec();
                let mut loss = 0.0f32;
                if k > 0 {
                    for (r, row) in probs.chunks_mut(k).enumerate() {
                        let logit_t = row[targets[r]];
                        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
                        loss += weights[r] * (lse - logit_t);
                        softmax_in_place(row);
                    }
                }
                (Tensor::scalar(loss), Cache::Probs(probs))
            }
            OpKind::SmoothL1 { targets, weights, beta } => {
                let x = self.value(inputs[0]).data();
                if targets.len() != x.len() || weights.len() != x.len() || *beta < 0.0 {
                    return Err(mismatch(name, format!("input {:?}, {} targets, {} weights", shapes[0], targets.len(), weights.len())));
                }
                let loss = x.iter().zip(targets).zip(weights).map(|((&v, &t), &w)| w * smooth_l1(v - t, *beta)).sum();
                (Tensor::scalar(loss), Cache::None)
            }
            OpKind::BinaryCrossEntropy { targets, weights } => {
                let x = self.value(inputs[0]).data();
                if targets.len() != x.len() || weights.len() != x.len() {
                    return Err(mismatch(name, format!("input {:?}, {} targets, {} weights", shapes[0], targets.len(), weights.len())));
                }
                let loss = x.iter().zip(targets).zip(weights).map(|((&v, &t), &w)| w * (v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())).sum();
                (Tensor::scalar(loss), Cache::None)
            }
            OpKind::RoiCropResize { rois, output_size, spatial_scales } => {
                let c = shapes[0].get(1).copied().unwrap_or(0);
                for (l, s) in shapes.iter().enumerate() {
                    if s.len() != 4 || s[1] != c || s[0] != shapes[0][0] {
                        return Err(mismatch(name, format!("feature level {l} has shape {s:?}")));
                    }
                }
                for (i, r) in rois.iter().enumerate() {
                    if r.level >= inputs.len() || r.batch >= shapes[0][0] || !(r.x2 > r.x1 && r.y2 > r.y1) {
                        return Err(mismatch(name, format!("roi {i} {r:?} invalid for {} levels", inputs.len())));
                    }
                }
                let m = *output_size;
                let mut y = vec![0.0f32; rois.len() * c * m * m];
                for (ri, r) in rois.iter().enumerate() {
                    let s = &shapes[r.level];
                    let plane = s[2] * s[3];
                    let feat = self.value(inputs[r.level]).data();
                    let taps = roi_taps(r, m, spatial_scales[r.level], s[2], s[3]);
                    for ch in 0..c {
                        let base = (r.batch * c + ch) * plane;
                        let out = &mut y[(ri * c + ch) * m * m..(ri * c + ch + 1) * m * m];
                        for (o, t) in out.iter_mut().zip(&taps) {
                            if let Some(t) = t {
                                *o = (0..4).map(|k| t.wt[k] * feat[base + t.idx[k]]).sum();
                            }
                        }
                    }
                }
                (Tensor::new([rois.len(), c, m, m], y), Cache::None)
            }
            OpKind::Reshape { shape } => {
                let n: usize = shape.iter().product();
                if n != self.value(inputs[0]).numel() {
                    return Err(mismatch(name, format!("{:?} -> {shape:?}", shapes[0])));
                }
                (Tensor::new(shape.clone(), self.value(inputs[0]).data().to_vec()), Cache::None)
            }
            OpKind::Sum => (Tensor::scalar(self.value(inputs[0]).data().iter().sum()), Cache::None),
            OpKind::Scale { factor } => {
                let y = self.value(inputs[0]).data().iter().map(|v| v * factor).collect();
                (Tensor::new(shapes[0].clone(), y), Cache::None)
            }
        };
        Ok(self.push(value, Some(kind), inputs.to_vec(), cache))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: root.value.shape().to_vec() });
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            let grads = self.input_grads(i, &dy);
            for (input, g) in self.nodes[i].inputs.clone().into_iter().zip(grads) {
                if let Some(g) = g {
                    match &mut adj[input.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.nodes[i].value.accumulate_grad(&dy);
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, dy: &[f32]) -> Vec<Option<Vec<f32>>> {
        let node = &self.nodes[i];
        let Some(kind) = &node.kind else { return Vec::new() };
        let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
        let val = |k: usize| self.nodes[node.inputs[k].0].value.data();
        let shp = |k: usize| self.nodes[node.inputs[k].0].value.shape();
        match kind {
            OpKind::Conv2d { stride, padding } => {
                let (xs, ws) = (shp(0), shp(1));
                let g = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], *stride, *padding).expect("validated in forward");
                let Cache::Cols(cols) = &node.cache else { unreachable!() };
                let has_b = node.inputs.len() == 3;
                let r = kernels::conv2d_backward(val(0), cols, xs[0], &g, val(1), ws[0], dy, (need[0], need[1], has_b && need[2]));
                let mut out = vec![r.dx, r.dw];
                if has_b {
                    out.push(r.db);
                }
                out
            }
            OpKind::GroupNorm { groups, .. } => {
                let xs = shp(0);
                let Cache::Norm { xhat, rstd } = &node.cache else { unreachable!() };
                let spatial: usize = xs[2..].iter().product();
                let (dx, dg, db) = kernels::group_norm_backward(dy, xhat, rstd, xs[0], xs[1], spatial, *groups, val(1), (need[0], need[1], need[2]));
                vec![dx, dg, db]
            }
            OpKind::Relu => vec![Some(val(0).iter().zip(dy).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }).collect())],
            OpKind::Linear => {
                let (xs, ws) = (shp(0), shp(1));
                let (n, inp, out) = (xs[0], xs[1], ws[0]);
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0f32; n * inp];
                    kernels::gemm(n, out, inp, dy, false, val(1), false, &mut dx, 0.0);
                    dx
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0f32; out * inp];
                    kernels::gemm(out, n, inp, dy, true, val(0), false, &mut dw, 0.0);
                    dw
                });
                let mut res = vec![dx, dw];
                if node.inputs.len() == 3 {
                    res.push(need[2].then(|| {
                        let mut db = vec![0.0f32; out];
                        dy.chunks(out.max(1)).for_each(|row| db.iter_mut().zip(row).for_each(|(a, b)| *a += b));
                        db
                    }));
                }
                res
            }
            OpKind::MaxPool { .. } => {
                let Cache::Argmax(arg) = &node.cache else { unreachable!() };
                let mut dx = vec![0.0f32; val(0).len()];
                arg.iter().zip(dy).for_each(|(&a, &d)| dx[a as usize] += d);
                vec![Some(dx)]
            }
            OpKind::NearestUpsample { factor } => {
                let xs = shp(0);
                let (h, w, f) = (xs[2], xs[3], *factor);
                let mut dx = vec![0.0f32; val(0).len()];
                for p in 0..xs[0] * xs[1] {
                    for oy in 0..h * f {
                        for ox in 0..w * f {
                            dx[p * h * w + (oy / f) * w + ox / f] += dy[p * h * w * f * f + oy * w * f + ox];
                        }
                    }
                }
                vec![Some(dx)]
            }
            OpKind::UpConv2x2 => {
                let (xs, ws) = (shp(0), shp(1));
                let (n, c, h, w, o) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
                let hw = h * w;
                let mut dx = need[0].then(|| vec![0.0f32; n * c * hw]);
                let mut dw = need[1].then(|| vec![0.0f32; c * o * 4]);
                let has_b = node.inputs.len() == 3;
                let mut db = (has_b && need[2]).then(|| vec![0.0f32; o]);
                let mut gathered = vec![0.0f32; o * 4 * hw];
                for b in 0..n {
                    let dyb = &dy[b * o * 4 * hw..(b + 1) * o * 4 * hw];
                    for oc in 0..o {
                        for k in 0..4 {
                            let (a, bb) = (k / 2, k % 2);
                            for i in 0..h {
                                for j in 0..w {
                                    gathered[(oc * 4 + k) * hw + i * w + j] = dyb[oc * 4 * hw + (2 * i + a) * 2 * w + 2 * j + bb];
                                }
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            db[oc] += dyb[oc * 4 * hw..(oc + 1) * 4 * hw].iter().sum::<f32>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm(c, o * 4, hw, val(1), false, &gathered, false, &mut dx[b * c * hw..(b + 1) * c * hw], 0.0);
                    }
                    if let Some(dw) = dw.as_mut() {
                        kernels::gemm(c, hw, o * 4, &val(0)[b * c * hw..(b + 1) * c * hw], false, &gathered, true, dw, 1.0);
                    }
                }
                let mut out = vec![dx, dw];
                if has_b {
                    out.push(db);
                }
                out
            }
            OpKind::Add => vec![need[0].then(|| dy.to_vec()), need[1].then(|| dy.to_vec())],
            OpKind::Sigmoid => {
                let y = node.value.data();
                vec![Some(y.iter().zip(dy).map(|(&s, &d)| d * s * (1.0 - s)).collect())]
            }
            OpKind::Softmax => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0f32; y.len()];
                if k > 0 {
                    for ((yr, dr), xr) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        xr.iter_mut().zip(yr.iter().zip(dr)).for_each(|(o, (yy, dd))| *o = yy * (dd - dot));
                    }
                }
                vec![Some(dx)]
            }
            OpKind::CrossEntropy { targets, weights } => {
                let Cache::Probs(probs) = &node.cache else { unreachable!() };
                let k = shp(0)[1];
                let mut dx = probs.clone();
                if k > 0 {
                    for (r, row) in dx.chunks_mut(k).enumerate() {
                        row[targets[r]] -= 1.0;
                        let s = weights[r] * dy[0];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                }
                vec![Some(dx)]
            }
            OpKind::SmoothL1 { targets, weights, beta } => {
                let dx = val(0)
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&v, &t), &w)| {
                        let d = v - t;
                        let g = if d.abs() < *beta { d / beta } else { d.signum() };
                        w * g * dy[0]
                    })
                    .collect();
                vec![Some(dx)]
            }
            OpKind::BinaryCrossEntropy { targets, weights } => {
                let dx = val(0).iter().zip(targets).zip(weights).map(|((&v, &t), &w)| w * (sigmoid(v) - t) * dy[0]).collect();
                vec![Some(dx)]
            }
            OpKind::RoiCropResize { rois, output_size, spatial_scales } => {
                let m = *output_size;
                let c = shp(0)[1];
                let mut grads: Vec<Option<Vec<f32>>> = need.iter().enumerate().map(|(k, &nd)| nd.then(|| vec![0.0f32; val(k).len()])).collect();
                for (ri, r) in rois.iter().enumerate() {
                    let Some(gl) = grads[r.level].as_mut() else { continue };
                    let s = shp(r.level);
                    let plane = s[2] * s[3];
                    let taps = roi_taps(r, m, spatial_scales[r.level], s[2], s[3]);
                    for ch in 0..c {
                        let base = (r.batch * c + ch) * plane;
                        let d = &dy[(ri * c + ch) * m * m..(ri * c + ch + 1) * m * m];
                        for (dv, t) in d.iter().zip(&taps) {
                            if let Some(t) = t {
                                for k in 0..4 {
                                    gl[base + t.idx[k]] += t.wt[k] * dv;
                                }
                            }
                        }
                    }
                }
                grads
            }
            OpKind::Reshape { .. } => vec![Some(dy.to_vec())],
            OpKind::Sum => vec![Some(vec![dy[0]; val(0).len()])],
            OpKind::Scale { factor } => vec![Some(dy.iter().map(|d| d * factor).collect())],
        }
    }
}

fn roi_taps(r: &RoiBox, m: usize, scale: f32, h: usize, w: usize) -> Vec<Option<Taps>> {
    let x0 = r.x1 * scale;
    let y0 = r.y1 * scale;
    let bw = (r.x2 - r.x1) * scale / m as f32;
    let bh = (r.y2 - r.y1) * scale / m as f32;
    let mut taps = Vec::with_capacity(m * m);
    for iy in 0..m {
        let y = y0 + (iy as f32 + 0.5) * bh - 0.5;
        for ix in 0..m {
            let x = x0 + (ix as f32 + 0.5) * bw - 0.5;
            taps.push(kernels::bilinear_taps(y, x, h, w));
        }
    }
    taps
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn smooth_l1(d: f32, beta: f32) -> f32 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_of_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1], vec![-2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let data = vec![1.5, -2.0, 3.25];
        let x = g.constant(Tensor::new([3], data.clone()));
        let z = g.constant(Tensor::zeros([3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn identity_kernel_conv() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.constant(Tensor::new([1, 1, 4, 4], data.clone()));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::new([1, 1, 3, 3], k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn square_gradient() {
        // loss = x * x expressed as sum(x ⊙ x) via a 1×1 linear layer
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([1, 1], vec![3.0]).with_requires_grad(true));
        let w = g.reshape(x, [1, 1]).unwrap();
        let y = g.linear(x, w, None).unwrap();
        let loss = g.sum(y).unwrap();
        assert_eq!(g.value(loss).item(), 9.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).with_requires_grad(true));
        let y = g.scale(x, 3.0).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2]));
        let b = g.constant(Tensor::zeros([3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d"), "{err}");
    }

    #[test]
    fn frozen_leaves_skip_backward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 2], vec![1.0, 2.0]));
        let w = g.param(0, &Tensor::new([1, 2], vec![0.5, 0.5]), false);
        let y = g.linear(x, w, None).unwrap();
        let loss = g.sum(y).unwrap();
        assert!(!g.requires_grad(loss));
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads().count(), 0);
    }

    #[test]
    fn roi_crop_of_constant_map_is_constant() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full([1, 2, 8, 8], 2.5));
        let roi = RoiBox { batch: 0, level: 0, x1: 4.0, y1: 4.0, x2: 20.0, y2: 28.0 };
        let y = g.forward_op(OpKind::RoiCropResize { rois: vec![roi], output_size: 3, spatial_scales: vec![0.25] }, &[f]).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn empty_roi_list_is_allowed() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros([1, 4, 8, 8]));
        let y = g.forward_op(OpKind::RoiCropResize { rois: vec![], output_size: 7, spatial_scales: vec![0.25] }, &[f]).unwrap();
        assert_eq!(g.shape(y), &[0, 4, 7, 7]);
        let flat = g.reshape(y, [0, 4 * 49]).unwrap();
        let w = g.constant(Tensor::zeros([3, 4 * 49]));
        let out = g.linear(flat, w, None).unwrap();
        assert_eq!(g.shape(out), &[0, 3]);
    }
}
