//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes are
//! appended in execution order, so a node's inputs always have smaller ids
//! and a single reverse sweep visits each node exactly once.
//!
//! Contract: gradients accumulate (sum) across fan-out and across repeated
//! calls to [`Graph::backward`]; call [`Graph::zero_grad`] to reset. A graph
//! built with [`Graph::no_grad`] records no backward rules at all.

pub mod gradcheck;
pub mod kernels;

use std::mem;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernels::{ConvGeometry, GroupNormStats};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    GroupNorm {
        input: Var,
        gain: Var,
        shift: Var,
        groups: usize,
        stats: GroupNormStats,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    NarrowBatch {
        input: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        weights: Vec<f32>,
        normalizer: f32,
    },
    SoftDice {
        logits: Var,
        targets: Vec<u8>,
        weights: Vec<f32>,
        smooth: f64,
        /// Per foreground class: (intersection, prediction mass, target mass).
        sums: Vec<(f64, f64, f64)>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Inference-only graph: values are computed, nothing is recorded.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Leaf that receives a gradient (ignored in a no-grad graph).
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.recording;
        self.leaf(value, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, shaped like the node's value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad congruent"))
    }

    /// Move the accumulated gradient out, leaving none behind.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        mem::take(&mut self.nodes[v.0].grad)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- primitives ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (f, wc, kh, kw) = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(Error::shape(
                OP,
                format!("input has {c} channels but weight expects {wc} (dim 1)"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(OP, "stride must be at least 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(
                OP,
                format!("kernel height {kh} exceeds padded height {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(
                OP,
                format!("kernel width {kw} exceeds padded width {}", w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?}, expected [{f}]", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            n,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([n, f, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (out, argmax) = kernels::max_pool2_forward(n * c, h, w, self.value(input).data());
        let value = Tensor::new([n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, &[input], Op::MaxPool2 { input, argmax }))
    }

    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample_bilinear2")?;
        let out = kernels::upsample2_forward(n * c, h, w, self.value(input).data());
        let value = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, &[input], Op::Upsample2 { input }))
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gain: Var,
        shift: Var,
        eps: f32,
    ) -> Result<Var> {
        const OP: &str = "group_norm";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                OP,
                format!("channels {c} not divisible by groups {groups}"),
            ));
        }
        for (name, v) in [("gain", gain), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    OP,
                    format!("{name} shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        let (out, stats) = kernels::group_norm_forward(
            n,
            c,
            h * w,
            groups,
            self.value(input).data(),
            self.value(gain).data(),
            self.value(shift).data(),
            eps,
        );
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            value,
            &[input, gain, shift],
            Op::GroupNorm {
                input,
                gain,
                shift,
                groups,
                stats,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, &[input], Op::Relu { input })
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("softmax_channels")?;
        if c == 0 {
            return Err(Error::shape("softmax_channels", "need at least one channel"));
        }
        let out = kernels::softmax_channels(n, c, h * w, self.value(input).data());
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(value, &[input], Op::Softmax { input }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                OP,
                format!("[{n},_,{h},{w}] vs [{nb},_,{hb},{wb}]"),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&da[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&db[i * pb..(i + 1) * pb]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        Ok(self.push(value, &[a, b], Op::ConcatChannels { a, b }))
    }

    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow_batch(start, len)?;
        Ok(self.push(value, &[input], Op::NarrowBatch { input, start }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        self.push(value, &[input], Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|&v| v as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), &[input], Op::Sum { input })
    }

    fn check_pixel_targets(
        &self,
        op: &'static str,
        logits: Var,
        targets: &[u8],
        weights: &[f32],
    ) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(logits).dims4(op)?;
        let pixels = n * h * w;
        if targets.len() != pixels || weights.len() != pixels {
            return Err(Error::shape(
                op,
                format!(
                    "logits cover {pixels} pixels but targets/weights have {}/{}",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(bad) = targets
            .iter()
            .zip(weights)
            .find(|(&t, &wt)| wt != 0.0 && t as usize >= c)
        {
            return Err(Error::shape(
                op,
                format!("label {} out of range for {c} classes", bad.0),
            ));
        }
        Ok((n, c, h * w))
    }

    /// `Σ_i w_i · (−log softmax(logits)_i[target_i]) / normalizer` over
    /// pixels. Pixels with zero weight are skipped entirely, so their target
    /// may hold an ignore value.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        weights: &[f32],
        normalizer: f32,
    ) -> Result<Var> {
        let (n, c, plane) = self.check_pixel_targets("cross_entropy", logits, targets, weights)?;
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        if normalizer > 0.0 {
            for b in 0..n {
                for p in 0..plane {
                    let i = b * plane + p;
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let at = |k: usize| x[(b * c + k) * plane + p];
                    let m = (0..c).map(at).fold(f32::NEG_INFINITY, f32::max);
                    let lse = m as f64 + (0..c).map(|k| ((at(k) - m) as f64).exp()).sum::<f64>().ln();
                    total += weights[i] as f64 * (lse - at(targets[i] as usize) as f64);
                }
            }
            total /= normalizer as f64;
        }
        let value = Tensor::scalar(total as f32);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                normalizer,
            },
        ))
    }

    /// `1 − mean_c (2I_c + s) / (P_c + G_c + s)` over foreground classes
    /// `c = 1..C`, with soft predictions from a channel softmax. Sums run
    /// over weighted pixels only; zero-weight pixels are excluded from both
    /// numerator and denominator.
    pub fn soft_dice(
        &mut self,
        logits: Var,
        targets: &[u8],
        weights: &[f32],
        smooth: f64,
    ) -> Result<Var> {
        let (n, c, plane) = self.check_pixel_targets("soft_dice", logits, targets, weights)?;
        if c < 2 {
            return Err(Error::shape("soft_dice", "need at least two classes"));
        }
        let probs = kernels::softmax_channels(n, c, plane, self.value(logits).data());
        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); c - 1];
        for b in 0..n {
            for p in 0..plane {
                let i = b * plane + p;
                let wt = weights[i] as f64;
                if wt == 0.0 {
                    continue;
                }
                for k in 1..c {
                    let pk = probs[(b * c + k) * plane + p] as f64;
                    let g = if targets[i] as usize == k { 1.0 } else { 0.0 };
                    let s = &mut sums[k - 1];
                    s.0 += wt * pk * g;
                    s.1 += wt * pk;
                    s.2 += wt * g;
                }
            }
        }
        let mean_dice = sums
            .iter()
            .map(|&(i, p, g)| (2.0 * i + smooth) / (p + g + smooth))
            .sum::<f64>()
            / (c - 1) as f64;
        let value = Tensor::scalar((1.0 - mean_dice) as f32);
        Ok(self.push(
            value,
            &[logits],
            Op::SoftDice {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smooth,
                sums,
            },
        ))
    }

    // ---- reverse sweep -------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Graph("backward on a no-grad graph".into()));
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        add_into(&mut self.nodes[loss.0].grad, vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            for (v, contrib) in node_backward(before, node, grad) {
                if before[v.0].requires_grad {
                    add_into(&mut before[v.0].grad, contrib);
                }
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

/// Gradient contributions of one node to its inputs.
fn node_backward(before: &[Node], node: &Node, grad: &[f32]) -> Vec<(Var, Vec<f32>)> {
    let val = |v: Var| &before[v.0].value;
    let rg = |v: Var| before[v.0].requires_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let n = val(*input).shape()[0];
            let g = kernels::conv2d_backward(
                geom,
                n,
                val(*input).data(),
                val(*weight).data(),
                grad,
                rg(*input),
                rg(*weight),
                bias.is_some_and(rg),
            );
            let mut out = Vec::new();
            if let Some(d) = g.input {
                out.push((*input, d));
            }
            if let Some(d) = g.weight {
                out.push((*weight, d));
            }
            if let (Some(b), Some(d)) = (bias, g.bias) {
                out.push((*b, d));
            }
            out
        }
        Op::MaxPool2 { input, argmax } => {
            let mut d = vec![0.0; val(*input).numel()];
            for (&idx, &g) in argmax.iter().zip(grad) {
                d[idx as usize] += g;
            }
            vec![(*input, d)]
        }
        Op::Upsample2 { input } => {
            let s = val(*input).shape();
            let d = kernels::upsample2_backward(s[0] * s[1], s[2], s[3], grad);
            vec![(*input, d)]
        }
        Op::GroupNorm {
            input,
            gain,
            shift,
            groups,
            stats,
        } => {
            let s = val(*input).shape();
            let (dx, dg, ds) = kernels::group_norm_backward(
                s[0],
                s[1],
                s[2] * s[3],
                *groups,
                val(*input).data(),
                val(*gain).data(),
                stats,
                grad,
            );
            vec![(*input, dx), (*gain, dg), (*shift, ds)]
        }
        Op::Relu { input } => {
            let x = val(*input).data();
            let d = x
                .iter()
                .zip(grad)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![(*input, d)]
        }
        Op::Softmax { input } => {
            let s = val(*input).shape();
            let d = kernels::softmax_channels_backward(
                s[0],
                s[1],
                s[2] * s[3],
                node.value.data(),
                grad,
            );
            vec![(*input, d)]
        }
        Op::ConcatChannels { a, b } => {
            let sa = val(*a).shape();
            let sb = val(*b).shape();
            let (n, plane) = (sa[0], sa[2] * sa[3]);
            let (pa, pb) = (sa[1] * plane, sb[1] * plane);
            let mut da = Vec::with_capacity(n * pa);
            let mut db = Vec::with_capacity(n * pb);
            for i in 0..n {
                let off = i * (pa + pb);
                da.extend_from_slice(&grad[off..off + pa]);
                db.extend_from_slice(&grad[off + pa..off + pa + pb]);
            }
            vec![(*a, da), (*b, db)]
        }
        Op::NarrowBatch { input, start } => {
            let x = val(*input);
            let item = x.numel() / x.shape()[0];
            let mut d = vec![0.0; x.numel()];
            d[start * item..start * item + grad.len()].copy_from_slice(grad);
            vec![(*input, d)]
        }
        Op::Add { a, b } => vec![(*a, grad.to_vec()), (*b, grad.to_vec())],
        Op::Mul { a, b } => {
            let (x, y) = (val(*a).data(), val(*b).data());
            let da = grad.iter().zip(y).map(|(g, q)| g * q).collect();
            let db = grad.iter().zip(x).map(|(g, p)| g * p).collect();
            vec![(*a, da), (*b, db)]
        }
        Op::Scale { input, factor } => {
            vec![(*input, grad.iter().map(|g| g * factor).collect())]
        }
        Op::Sum { input } => vec![(*input, vec![grad[0]; val(*input).numel()])],
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            normalizer,
        } => {
            let s = val(*logits).shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let mut d = vec![0.0; val(*logits).numel()];
            if *normalizer > 0.0 {
                let probs = kernels::softmax_channels(n, c, plane, val(*logits).data());
                let scale = grad[0] / normalizer;
                for b in 0..n {
                    for p in 0..plane {
                        let i = b * plane + p;
                        let wt = weights[i];
                        if wt == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            let j = (b * c + k) * plane + p;
                            let hot = if targets[i] as usize == k { 1.0 } else { 0.0 };
                            d[j] = scale * wt * (probs[j] - hot);
                        }
                    }
                }
            }
            vec![(*logits, d)]
        }
        Op::SoftDice {
            logits,
            targets,
            weights,
            smooth,
            sums,
        } => {
            let s = val(*logits).shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let probs = kernels::softmax_channels(n, c, plane, val(*logits).data());
            let mut dprobs = vec![0.0; probs.len()];
            let nfg = (c - 1) as f64;
            let g0 = grad[0] as f64;
            for b in 0..n {
                for p in 0..plane {
                    let i = b * plane + p;
                    let wt = weights[i] as f64;
                    if wt == 0.0 {
                        continue;
                    }
                    for k in 1..c {
                        let (inter, pm, gm) = sums[k - 1];
                        let denom = pm + gm + smooth;
                        let g = if targets[i] as usize == k { 1.0 } else { 0.0 };
                        let ddice = wt * (2.0 * g * denom - (2.0 * inter + smooth)) / (denom * denom);
                        dprobs[(b * c + k) * plane + p] = (-g0 * ddice / nfg) as f32;
                    }
                }
            }
            let d = kernels::softmax_channels_backward(n, c, plane, &probs, &dprobs);
            vec![(*logits, d)]
        }
    }
}
