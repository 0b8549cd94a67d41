//! Parameter-free image synthesis from the backbone's feature taps.
//!
//! Each tap is reduced to a single channel (channel mean, then per-sample
//! min-max to `[0, 1]`) and the two maps are blended with a random convex
//! weight. For three-channel inputs the blend becomes the luma channel and
//! the chroma of the source view is kept.

use rand::distributions::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::TappedOutput;

pub const LUMA_R: f32 = 0.299;
pub const LUMA_G: f32 = 0.587;
pub const LUMA_B: f32 = 0.114;

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
        });
    }
    Ok(())
}

/// Channel mean followed by per-sample min-max normalization. A constant
/// map becomes all 0.5.
pub fn reduce_feature(feat: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = feat.dims4("reduce_feature")?;
    if c == 0 {
        return Err(Error::shape("reduce_feature", "feature map has no channels"));
    }
    check_finite(feat, "feature map")?;
    let plane = h * w;
    let mut out = vec![0.0f32; n * plane];
    for (i, dst) in out.chunks_mut(plane).enumerate() {
        let src = &feat.data()[i * c * plane..(i + 1) * c * plane];
        for ch in src.chunks(plane) {
            dst.iter_mut().zip(ch).for_each(|(d, v)| *d += v);
        }
        dst.iter_mut().for_each(|d| *d /= c as f32);
        let (lo, hi) = dst
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            let span = hi - lo;
            dst.iter_mut().for_each(|d| *d = ((*d - lo) / span).clamp(0.0, 1.0));
        } else {
            dst.fill(0.5);
        }
    }
    Tensor::new([n, 1, h, w], out)
}

/// Pixelwise `alpha · texture + (1 − alpha) · shape` on reduced maps.
pub fn synthesize(texture: &Tensor, shape: &Tensor, alpha: f32) -> Result<Tensor> {
    if texture.shape() != shape.shape() {
        return Err(Error::shape(
            "synthesize",
            format!("texture {:?} vs shape {:?}", texture.shape(), shape.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let in_unit = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_unit(texture) || !in_unit(shape) {
        return Err(Error::Config("synthesis inputs must lie in [0, 1]".into()));
    }
    let data = texture
        .data()
        .iter()
        .zip(shape.data())
        .map(|(&t, &s)| alpha * t + (1.0 - alpha) * s)
        .collect();
    Tensor::new(texture.shape().to_vec(), data)
}

/// BT.601 luma of an RGB pixel.
#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA_R * r + LUMA_G * g + LUMA_B * b
}

/// `(Cb, Cr)` chroma differences of an RGB pixel.
#[inline]
pub fn chroma(r: f32, g: f32, b: f32) -> (f32, f32) {
    let y = luma(r, g, b);
    (0.5 * (b - y) / (1.0 - LUMA_B), 0.5 * (r - y) / (1.0 - LUMA_R))
}

#[inline]
fn rgb_from_ycbcr(y: f32, cb: f32, cr: f32) -> (f32, f32, f32) {
    let r = y + cr * (1.0 - LUMA_R) / 0.5;
    let b = y + cb * (1.0 - LUMA_B) / 0.5;
    let g = (y - LUMA_R * r - LUMA_B * b) / LUMA_G;
    (r, g, b)
}

/// Replace the luma of `original` with `synth_luma`, keep its chroma,
/// convert back to RGB and clamp to `[0, 1]`.
pub fn luminance_merge(synth_luma: &Tensor, original: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = original.dims4("luminance_merge")?;
    if c != 3 || synth_luma.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            "luminance_merge",
            format!(
                "expected luma [{n},1,{h},{w}] and RGB [{n},3,{h},{w}], got {:?} and {:?}",
                synth_luma.shape(),
                original.shape()
            ),
        ));
    }
    let plane = h * w;
    let mut out = vec![0.0; original.numel()];
    let src = original.data();
    for i in 0..n {
        let base = i * 3 * plane;
        for p in 0..plane {
            let (r, g, b) = (src[base + p], src[base + plane + p], src[base + 2 * plane + p]);
            let (cb, cr) = chroma(r, g, b);
            let y = synth_luma.data()[i * plane + p];
            let (r2, g2, b2) = rgb_from_ycbcr(y, cb, cr);
            out[base + p] = r2.clamp(0.0, 1.0);
            out[base + plane + p] = g2.clamp(0.0, 1.0);
            out[base + 2 * plane + p] = b2.clamp(0.0, 1.0);
        }
    }
    Tensor::new([n, 3, h, w], out)
}

/// A batch of synthesized images with the weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedImage {
    pub images: Tensor,
    pub alphas: Vec<f32>,
    /// Batch index of the unlabeled source item for each image.
    pub source_index: Vec<usize>,
}

/// Synthesize one image per batch item from detached taps, drawing an
/// independent `alpha ~ U(0, 1)` for each. `views` are the images the taps
/// were computed from; their chroma is reused for RGB inputs.
pub fn synthesize_batch(taps: &TappedOutput, views: &Tensor, rng: &mut impl Rng) -> Result<SynthesizedImage> {
    let (n, c, h, w) = views.dims4("synthesize_batch")?;
    let (tn, _, th, tw) = taps.texture.dims4("synthesize_batch")?;
    if (tn, th, tw) != (n, h, w) || taps.shape.shape() != taps.texture.shape() {
        return Err(Error::shape(
            "synthesize_batch",
            format!(
                "taps {:?}/{:?} do not match views {:?}",
                taps.texture.shape(),
                taps.shape.shape(),
                views.shape()
            ),
        ));
    }
    let texture = reduce_feature(&taps.texture)?;
    let shape = reduce_feature(&taps.shape)?;
    let mut alphas = Vec::with_capacity(n);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let alpha: f32 = rng.sample(Open01);
        let t = texture.narrow_batch(i, 1)?;
        let s = shape.narrow_batch(i, 1)?;
        items.push(synthesize(&t, &s, alpha)?);
        alphas.push(alpha);
    }
    let luma = Tensor::cat_batch(&items)?;
    let images = match c {
        1 => luma,
        3 => luminance_merge(&luma, views)?,
        _ => {
            return Err(Error::shape(
                "synthesize_batch",
                format!("synthesis supports 1 or 3 channels, got {c}"),
            ))
        }
    };
    Ok(SynthesizedImage {
        images,
        alphas,
        source_index: (0..n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn reduce_keeps_unit_range_single_channel() {
        let t = Tensor::new([1, 1, 2, 2], vec![0.0, 0.25, 1.0, 0.5]).unwrap();
        assert_eq!(reduce_feature(&t).unwrap(), t);
    }

    #[test]
    fn reduce_constant_is_half() {
        let t = Tensor::full([2, 3, 4, 4], 7.0);
        let r = reduce_feature(&t).unwrap();
        assert_eq!(r.shape(), &[2, 1, 4, 4]);
        assert!(r.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reduce_two_channel_by_hand() {
        // channel 0 = [[0,2],[2,0]], channel 1 = [[2,0],[0,2]] would be
        // constant after the mean; use channel 1 = [[0,0],[2,2]] instead:
        // mean = [[0,1],[2,1]] -> min-max -> [[0,0.5],[1,0.5]]
        let t = Tensor::new([1, 2, 2, 2], vec![0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let r = reduce_feature(&t).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 0.5]);
        let complementary =
            Tensor::new([1, 2, 2, 2], vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(reduce_feature(&complementary).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reduce_rejects_non_finite() {
        let t = Tensor::new([1, 1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(reduce_feature(&t).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn([1, 1, 4, 4], |_| rng.gen());
        let s = Tensor::from_fn([1, 1, 4, 4], |_| rng.gen());
        assert_eq!(synthesize(&t, &s, 1.0).unwrap(), t);
        assert_eq!(synthesize(&t, &s, 0.0).unwrap(), s);
        let mid = synthesize(&Tensor::full([1, 1, 2, 2], 0.2), &Tensor::full([1, 1, 2, 2], 0.8), 0.5).unwrap();
        assert!(mid.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(synthesize(&t, &Tensor::zeros([1, 1, 2, 2]), 0.5).is_err());
        assert!(synthesize(&t, &s, 1.5).is_err());
    }

    #[test]
    fn luminance_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rgb = Tensor::from_fn([2, 3, 5, 5], |_| rng.gen());
        let plane = 25;
        let y = Tensor::from_fn([2, 1, 5, 5], |i| {
            let (n, p) = (i / plane, i % plane);
            let d = rgb.data();
            luma(d[n * 75 + p], d[n * 75 + 25 + p], d[n * 75 + 50 + p])
        });
        let merged = luminance_merge(&y, &rgb).unwrap();
        assert!(merged.max_abs_diff(&rgb) <= 1e-5);
    }

    #[test]
    fn grey_original_gives_grey_output() {
        let grey = Tensor::full([1, 3, 2, 2], 0.4);
        let l = Tensor::new([1, 1, 2, 2], vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        let out = luminance_merge(&l, &grey).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                assert!((out.data()[c * 4 + p] - l.data()[p]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_synthesis_draws_one_alpha_per_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let taps = TappedOutput {
            logits: Tensor::zeros([4, 2, 8, 8]),
            texture: Tensor::from_fn([4, 3, 8, 8], |_| rng.gen()),
            shape: Tensor::from_fn([4, 3, 8, 8], |_| rng.gen()),
        };
        let views = Tensor::zeros([4, 1, 8, 8]);
        let a = synthesize_batch(&taps, &views, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synthesize_batch(&taps, &views, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[4, 1, 8, 8]);
        assert!(a.alphas.iter().all(|&x| x > 0.0 && x < 1.0));
        let mut distinct = a.alphas.clone();
        distinct.sort_by(f32::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
