//! Procedural grayscale images with pixel-exact dense labels.
//!
//! Background is two-octave value noise. Each foreground class gets one or
//! two ellipses or annuli with a class-specific texture (stripes for odd
//! classes, checkerboard for even ones) and a class-specific mean level.

use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    /// Accepted band of total foreground area fraction.
    pub min_foreground: f64,
    pub max_foreground: f64,
    /// Semi-axis range as a fraction of the image side.
    pub radius_min: f32,
    pub radius_max: f32,
    pub texture_amplitude: f32,
    pub noise_sigma: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 250,
            size: 64,
            classes: 3,
            seed: 0,
            min_foreground: 0.05,
            max_foreground: 0.40,
            radius_min: 0.08,
            radius_max: 0.22,
            texture_amplitude: 0.12,
            noise_sigma: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 8", self.size)));
        }
        if !(2..=32).contains(&self.classes) {
            return Err(Error::Config(format!("classes must be in 2..=32, got {}", self.classes)));
        }
        if !(0.0..self.max_foreground).contains(&self.min_foreground) || self.max_foreground > 1.0 {
            return Err(Error::Config("foreground band must satisfy 0 <= min < max <= 1".into()));
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max) {
            return Err(Error::Config("radius range must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Stripes { freq: f32, angle: f32, phase: f32 },
    Checker { period: f32, angle: f32 },
}

impl Texture {
    fn value(&self, y: f32, x: f32) -> f32 {
        match *self {
            Texture::Stripes { freq, angle, phase } => {
                let u = x * angle.cos() + y * angle.sin();
                if (2.0 * PI * freq * u + phase).sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Checker { period, angle } => {
                let (c, s) = (angle.cos(), angle.sin());
                let u = ((x * c + y * s) / period).floor() as i64;
                let v = ((y * c - x * s) / period).floor() as i64;
                if (u + v).rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

struct Structure {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    angle: f32,
    /// Inner radius ratio of an annulus; zero for a filled ellipse.
    hole: f32,
}

impl Structure {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let r2 = u * u + v * v;
        r2 <= 1.0 && r2 >= self.hole * self.hole
    }
}

/// Mean intensity of class `k`, spread evenly over `[0.3, 0.7]`.
fn class_level(k: usize, classes: usize) -> f32 {
    if classes == 2 {
        return 0.7;
    }
    let t = (k - 1) as f32 / (classes - 2) as f32;
    0.7 - 0.4 * t
}

fn value_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    for (cell, weight) in [(16usize, 0.7f32), (4, 0.3)] {
        let g = size / cell + 2;
        let grid: Vec<f32> = (0..g * g).map(|_| rng.gen::<f32>()).collect();
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f32 / cell as f32, x as f32 / cell as f32);
                let (iy, ix) = (fy as usize, fx as usize);
                let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
                let at = |r: usize, c: usize| grid[r * g + c];
                let top = at(iy, ix) * (1.0 - sx) + at(iy, ix + 1) * sx;
                let bot = at(iy + 1, ix) * (1.0 - sx) + at(iy + 1, ix + 1) * sx;
                out[y * size + x] += weight * (top * (1.0 - sy) + bot * sy);
            }
        }
    }
    out
}

fn sample_texture(k: usize, rng: &mut ChaCha8Rng) -> Texture {
    let angle = rng.gen_range(0.0..PI);
    if k % 2 == 1 {
        Texture::Stripes { freq: rng.gen_range(0.15..0.3), angle, phase: rng.gen_range(0.0..2.0 * PI) }
    } else {
        Texture::Checker { period: rng.gen_range(2.5..4.5), angle }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(rand_distr::StandardNormal)
}

/// One attempt; `None` when the area band or class presence is violated.
fn try_sample(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Option<(Vec<f32>, LabelMap)> {
    let s = cfg.size;
    let sf = s as f32;
    let mut image: Vec<f32> = value_noise(s, rng).into_iter().map(|v| 0.25 + 0.3 * v).collect();
    let mut label = LabelMap::filled(s, s, 0);
    let mut order: Vec<usize> = (1..cfg.classes).flat_map(|k| vec![k; rng.gen_range(1..=2)]).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    for k in order {
        let a = rng.gen_range(cfg.radius_min..=cfg.radius_max) * sf;
        let b = rng.gen_range(cfg.radius_min..=cfg.radius_max) * sf;
        let margin = a.max(b) * 0.6;
        let st = Structure {
            cy: rng.gen_range(margin..sf - margin),
            cx: rng.gen_range(margin..sf - margin),
            a,
            b,
            angle: rng.gen_range(0.0..PI),
            hole: if rng.gen_bool(0.35) { rng.gen_range(0.4..0.65) } else { 0.0 },
        };
        let tex = sample_texture(k, rng);
        let level = class_level(k, cfg.classes) + rng.gen_range(-0.04..0.04);
        for y in 0..s {
            for x in 0..s {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                if st.contains(py, px) {
                    label.set(y, x, k as u8);
                    image[y * s + x] = level + cfg.texture_amplitude * tex.value(py, px);
                }
            }
        }
    }
    let fg = label.data.iter().filter(|&&v| v != 0).count() as f64 / (s * s) as f64;
    if fg < cfg.min_foreground || fg > cfg.max_foreground {
        return None;
    }
    let hist = label.histogram(cfg.classes);
    if hist[1..].iter().any(|&c| c < 2 * crate::data::scribble::MIN_REGION) {
        return None;
    }
    for v in &mut image {
        *v = (*v + cfg.noise_sigma * gaussian(rng)).clamp(0.0, 1.0);
    }
    Some((image, label))
}

/// Image `[1, S, S]` in `[0, 1]` and its dense label, a pure function of
/// `(cfg, index)`.
pub fn generate_sample(cfg: &GenConfig, index: usize) -> Result<(Tensor, LabelMap)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, index as u64);
    for _ in 0..10_000 {
        if let Some((img, label)) = try_sample(cfg, &mut rng) {
            return Ok((Tensor::new([1, cfg.size, cfg.size], img)?, label));
        }
    }
    Err(Error::Config(format!(
        "could not place structures meeting the foreground band for sample {index}"
    )))
}
