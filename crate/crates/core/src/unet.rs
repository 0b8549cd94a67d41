//! U-Net backbone with texture and shape feature taps.
//!
//! Block layout per level: two `conv3x3 → group_norm → relu` units. The
//! decoder upsamples bilinearly, projects with a 1×1 conv to the skip's
//! width, concatenates `[skip, up]` and runs a block. The texture tap is the
//! output of the first encoder block, the shape tap the output of the last
//! decoder block (the input of the 1×1 segmentation head). Both are full
//! resolution with `base_channels` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            base_channels: 16,
            depth: 4,
            norm_groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need in_channels >= 1 and num_classes >= 2, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "base_channels {} not divisible by norm_groups {}",
                self.base_channels, self.norm_groups
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `level` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must survive `depth - 1` halvings.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::shape("unet", format!("expected [N,C,H,W], got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::shape(
                "unet",
                format!("input has {c} channels, model expects {}", self.in_channels),
            ));
        }
        let d = self.spatial_divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "unet",
                format!("spatial size {h}x{w} not divisible by {d}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Unit {
    conv: ConvSlot,
    gain: usize,
    shift: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    first: Unit,
    second: Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub params: ParamStore,
    encoder: Vec<Block>,
    /// Indexed by decoder level, 0 = full resolution.
    up_proj: Vec<ConvSlot>,
    decoder: Vec<Block>,
    head: ConvSlot,
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TappedVars {
    pub logits: Var,
    pub texture: Var,
    pub shape: Var,
}

/// Materialized outputs of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TappedOutput {
    pub logits: Tensor,
    pub texture: Tensor,
    pub shape: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, params: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> ConvSlot {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn([cout, cin, k, k], |_| normal.sample(&mut self.rng));
        ConvSlot {
            weight: params.push(format!("{name}.weight"), w),
            bias: params.push(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    fn unit(&mut self, params: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Unit {
        let conv = self.conv(params, &format!("{name}.conv"), cin, cout, 3);
        Unit {
            conv,
            gain: params.push(format!("{name}.norm.gain"), Tensor::full([cout], 1.0)),
            shift: params.push(format!("{name}.norm.shift"), Tensor::zeros([cout])),
        }
    }

    fn block(&mut self, params: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            first: self.unit(params, &format!("{name}.0"), cin, cout),
            second: self.unit(params, &format!("{name}.1"), cout, cout),
        }
    }
}

impl UNetModel {
    /// He-initialized conv weights, zero biases, identity norms.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let cin = if level == 0 {
                config.in_channels
            } else {
                config.width(level - 1)
            };
            encoder.push(init.block(&mut params, &format!("enc{level}"), cin, config.width(level)));
        }
        let mut up_proj = vec![ConvSlot { weight: 0, bias: 0 }; config.depth - 1];
        let mut decoder = vec![encoder[0]; config.depth - 1];
        for level in (0..config.depth - 1).rev() {
            let c = config.width(level);
            up_proj[level] = init.conv(&mut params, &format!("up{level}"), config.width(level + 1), c, 1);
            decoder[level] = init.block(&mut params, &format!("dec{level}"), 2 * c, c);
        }
        let head = init.conv(&mut params, "head", config.base_channels, config.num_classes, 1);
        Ok(Self {
            config,
            params,
            encoder,
            up_proj,
            decoder,
            head,
        })
    }

    fn unit(&self, g: &mut Graph, p: &[Var], u: &Unit, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[u.conv.weight], Some(p[u.conv.bias]), 1, 1)?;
        let y = g.group_norm(y, self.config.norm_groups, p[u.gain], p[u.shift], NORM_EPS)?;
        Ok(g.relu(y))
    }

    fn block(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var) -> Result<Var> {
        let y = self.unit(g, p, &b.first, x)?;
        self.unit(g, p, &b.second, y)
    }

    /// Forward pass in `graph` with parameters bound by
    /// [`ParamStore::bind`].
    pub fn forward(&self, graph: &mut Graph, bound: &[Var], x: Var) -> Result<TappedVars> {
        self.config.check_input(graph.value(x).shape())?;
        if bound.len() != self.params.len() {
            return Err(Error::shape(
                "unet",
                format!("{} bound parameters, model has {}", bound.len(), self.params.len()),
            ));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (level, block) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = graph.max_pool2(h)?;
            }
            h = self.block(graph, bound, block, h)?;
            skips.push(h);
        }
        let texture = skips[0];
        for level in (0..self.config.depth - 1).rev() {
            let up = graph.upsample_bilinear2(h)?;
            let proj = self.up_proj[level];
            let up = graph.conv2d(up, bound[proj.weight], Some(bound[proj.bias]), 1, 0)?;
            let cat = graph.concat_channels(skips[level], up)?;
            h = self.block(graph, bound, &self.decoder[level], cat)?;
        }
        let shape = h;
        let logits = graph.conv2d(h, bound[self.head.weight], Some(bound[self.head.bias]), 1, 0)?;
        Ok(TappedVars {
            logits,
            texture,
            shape,
        })
    }

    /// Inference pass without any gradient recording.
    pub fn forward_with_taps(&self, x: &Tensor) -> Result<TappedOutput> {
        self.infer(&mut Graph::no_grad(), x)
    }

    /// Inference in a caller-supplied graph, which must not record; callers
    /// can inspect it afterwards.
    pub fn infer(&self, graph: &mut Graph, x: &Tensor) -> Result<TappedOutput> {
        if graph.is_recording() {
            return Err(Error::Graph("inference requires a no-grad graph".into()));
        }
        self.config.check_input(x.shape())?;
        let bound = self.params.bind(graph);
        let xv = graph.constant(x.clone());
        let t = self.forward(graph, &bound, xv)?;
        Ok(TappedOutput {
            logits: graph.value(t.logits).clone(),
            texture: graph.value(t.texture).clone(),
            shape: graph.value(t.shape).clone(),
        })
    }

    /// Hard predictions for `[N, C, H, W]` inputs.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<LabelMap>> {
        let out = self.forward_with_taps(x)?;
        argmax_labels(&out.logits)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }
}

/// Per-pixel argmax over the channel axis of `[N, C, H, W]` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = logits.dims4("argmax_labels")?;
    let plane = h * w;
    let x = logits.data();
    (0..n)
        .map(|i| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if x[(i * c + k) * plane + p] > x[(i * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}
