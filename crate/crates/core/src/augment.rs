//! Weak and strong views with replayable transform records.
//!
//! Geometry is expressed as a gather map from view pixels to source pixels,
//! so the same record moves images, label maps and confidence maps in exact
//! pixel correspondence. Resampling after the crop is nearest-neighbour for
//! every kind of map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Cutmix,
    Mixup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub crop_scale_min: f32,
    pub rotate: bool,
    pub flip: bool,
    pub intensity: bool,
    /// Additive brightness range `±brightness`.
    pub brightness: f32,
    /// Contrast factor range `1 ± contrast`.
    pub contrast: f32,
    pub blur_prob: f32,
    pub blur_sigma_min: f32,
    pub blur_sigma_max: f32,
    pub mix_prob: f32,
    pub mix_mode: MixMode,
    pub cutmix_area_min: f32,
    pub cutmix_area_max: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.8,
            rotate: true,
            flip: true,
            intensity: true,
            brightness: 0.3,
            contrast: 0.3,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.5,
            mix_prob: 0.5,
            mix_mode: MixMode::Cutmix,
            cutmix_area_min: 0.02,
            cutmix_area_max: 0.4,
        }
    }
}

/// Square crop in source coordinates followed by a resize back to the
/// source size, `rotation` clockwise quarter turns, then flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometric {
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_size: usize,
    pub rotation: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Geometric {
    pub fn identity(size: usize) -> Self {
        Self {
            crop_y: 0,
            crop_x: 0,
            crop_size: size,
            rotation: 0,
            flip_h: false,
            flip_v: false,
        }
    }

    pub fn is_full_frame(&self, size: usize) -> bool {
        self.crop_y == 0 && self.crop_x == 0 && self.crop_size == size
    }

    /// For each view pixel, the flat index of its source pixel.
    pub fn gather_map(&self, size: usize) -> Vec<usize> {
        let mut map = Vec::with_capacity(size * size);
        for vy in 0..size {
            for vx in 0..size {
                let (mut y, mut x) = (vy, vx);
                if self.flip_h {
                    x = size - 1 - x;
                }
                if self.flip_v {
                    y = size - 1 - y;
                }
                for _ in 0..self.rotation % 4 {
                    (y, x) = (size - 1 - x, y);
                }
                let sy = self.crop_y + ((2 * y + 1) * self.crop_size) / (2 * size);
                let sx = self.crop_x + ((2 * x + 1) * self.crop_size) / (2 * size);
                map.push(sy * size + sx);
            }
        }
        map
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub brightness: f32,
    pub contrast: f32,
    pub blur_sigma: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixBox {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl MixBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.height && x >= self.x && x < self.x + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mix {
    /// Pixels inside the box come from the partner's view.
    CutMix { partner: usize, area: MixBox },
    /// Image blend `lambda · own + (1 − lambda) · partner`; `lambda ≥ 0.5`
    /// and maps keep the dominant (own) item's values.
    Mixup { partner: usize, lambda: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub geometric: Geometric,
    pub intensity: Option<Intensity>,
    pub mix: Option<Mix>,
}

impl AugmentationRecord {
    pub fn identity(size: usize) -> Self {
        Self {
            geometric: Geometric::identity(size),
            intensity: None,
            mix: None,
        }
    }
}

fn square_size(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[c, h, w] if h == w => Ok((c, h)),
        s => Err(Error::shape("augment", format!("expected square [C,H,W] image, got {s:?}"))),
    }
}

/// Apply the geometric part of a record to a `[C, H, W]` image.
pub fn apply_geometric(geo: &Geometric, image: &Tensor) -> Result<Tensor> {
    let (c, size) = square_size(image)?;
    let map = geo.gather_map(size);
    let plane = size * size;
    let src = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for ch in 0..c {
        out.extend(map.iter().map(|&i| src[ch * plane + i]));
    }
    Tensor::new([c, size, size], out)
}

pub fn sample_geometric(size: usize, params: &AugmentParams, rng: &mut impl Rng) -> Geometric {
    let scale = if params.crop_scale_min < 1.0 {
        rng.gen_range(params.crop_scale_min..=1.0)
    } else {
        1.0
    };
    let crop_size = ((scale * size as f32).round() as usize).clamp(1, size);
    let slack = size - crop_size;
    Geometric {
        crop_y: rng.gen_range(0..=slack),
        crop_x: rng.gen_range(0..=slack),
        crop_size,
        rotation: if params.rotate { rng.gen_range(0..4) } else { 0 },
        flip_h: params.flip && rng.gen_bool(0.5),
        flip_v: params.flip && rng.gen_bool(0.5),
    }
}

/// Random crop, right-angle rotation and flips.
pub fn weak_view(image: &Tensor, params: &AugmentParams, rng: &mut impl Rng) -> Result<(Tensor, AugmentationRecord)> {
    let (_, size) = square_size(image)?;
    let geometric = sample_geometric(size, params, rng);
    let view = apply_geometric(&geometric, image)?;
    Ok((
        view,
        AugmentationRecord {
            geometric,
            intensity: None,
            mix: None,
        },
    ))
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Separable Gaussian blur of each channel plane with reflected borders.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Result<Tensor> {
    let (c, size) = square_size(image)?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let plane = size * size;
    let mut out = image.clone();
    let mut tmp = vec![0.0; plane];
    for ch in 0..c {
        let src = &image.data()[ch * plane..(ch + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                tmp[y * size + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[y * size + reflect(x as isize + j as isize - r, size)])
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                dst[y * size + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - r, size) * size + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Brightness/contrast jitter around the image mean, optional blur, clamp.
pub fn apply_intensity(ops: &Intensity, image: &Tensor) -> Result<Tensor> {
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() as f32 / image.numel().max(1) as f32;
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = ((*v - mean) * ops.contrast + mean + ops.brightness).clamp(0.0, 1.0);
    }
    match ops.blur_sigma {
        Some(s) => gaussian_blur(&out, s),
        None => Ok(out),
    }
}

pub fn sample_intensity(params: &AugmentParams, rng: &mut impl Rng) -> Intensity {
    let sym = |rng: &mut _, r: f32| if r > 0.0 { Rng::gen_range(rng, -r..=r) } else { 0.0 };
    let brightness = sym(rng, params.brightness);
    let contrast = 1.0 + sym(rng, params.contrast);
    let blur_sigma = (params.blur_prob > 0.0 && rng.gen_bool(params.blur_prob as f64))
        .then(|| rng.gen_range(params.blur_sigma_min..=params.blur_sigma_max));
    Intensity {
        brightness,
        contrast,
        blur_sigma,
    }
}

/// Strong view of `image` sharing `base`'s geometry exactly, plus intensity
/// jitter (unless disabled). Batch mixing is added by [`mix_batch`].
pub fn strong_view(
    image: &Tensor,
    base: Option<&AugmentationRecord>,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<(Tensor, AugmentationRecord)> {
    let base = base.ok_or_else(|| Error::Config("strong view needs the weak record of the same sample".into()))?;
    let view = apply_geometric(&base.geometric, image)?;
    let intensity = params.intensity.then(|| sample_intensity(params, rng));
    let view = match &intensity {
        Some(ops) => apply_intensity(ops, &view)?,
        None => view,
    };
    Ok((
        view,
        AugmentationRecord {
            geometric: base.geometric,
            intensity,
            mix: None,
        },
    ))
}

pub fn sample_box(size: usize, params: &AugmentParams, rng: &mut impl Rng) -> MixBox {
    let area = rng.gen_range(params.cutmix_area_min..=params.cutmix_area_max) * (size * size) as f32;
    let ratio: f32 = rng.gen_range(0.3f32..=1.0 / 0.3);
    let height = ((area * ratio).sqrt().round() as usize).clamp(1, size);
    let width = ((area / ratio).sqrt().round() as usize).clamp(1, size);
    MixBox {
        y: rng.gen_range(0..=size - height),
        x: rng.gen_range(0..=size - width),
        height,
        width,
    }
}

/// Mix per-pixel maps (`[H*W]`, already in view frame) using a record's mix.
pub fn mix_map<T: Copy>(record: &AugmentationRecord, size: usize, own: &[T], partner: Option<&[T]>) -> Vec<T> {
    match (record.mix, partner) {
        (Some(Mix::CutMix { area, .. }), Some(p)) => (0..size * size)
            .map(|i| if area.contains(i / size, i % size) { p[i] } else { own[i] })
            .collect(),
        _ => own.to_vec(),
    }
}

/// Nearest-neighbour geometric transform of a source-frame label map,
/// followed by the record's mixing against the partner's view-frame map.
pub fn apply_to_label(record: &AugmentationRecord, label: &LabelMap, partner_view: Option<&LabelMap>) -> Result<LabelMap> {
    if label.height != label.width {
        return Err(Error::shape("apply_to_label", "label map must be square"));
    }
    let size = label.height;
    let map = record.geometric.gather_map(size);
    let geo: Vec<u8> = map.iter().map(|&i| label.data[i]).collect();
    let data = mix_map(record, size, &geo, partner_view.map(|p| p.data.as_slice()));
    LabelMap::new(size, size, data)
}

/// Same as [`apply_to_label`] for confidence maps.
pub fn apply_to_confidence(record: &AugmentationRecord, size: usize, conf: &[f32], partner_view: Option<&[f32]>) -> Vec<f32> {
    let map = record.geometric.gather_map(size);
    let geo: Vec<f32> = map.iter().map(|&i| conf[i]).collect();
    mix_map(record, size, &geo, partner_view)
}

/// Batch-level mixing: each item is mixed with probability `mix_prob` with
/// a different item, reading the partner's unmixed view. Records are
/// updated in place and mixed images returned.
pub fn mix_batch(
    views: &[Tensor],
    records: &mut [AugmentationRecord],
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    let n = views.len();
    let mut out = views.to_vec();
    if n < 2 || params.mix_prob <= 0.0 {
        return Ok(out);
    }
    for i in 0..n {
        if !rng.gen_bool(params.mix_prob as f64) {
            continue;
        }
        let partner = (i + rng.gen_range(1..n)) % n;
        let (c, size) = square_size(&views[i])?;
        let plane = size * size;
        match params.mix_mode {
            MixMode::Cutmix => {
                let area = sample_box(size, params, rng);
                let dst = out[i].data_mut();
                let src = views[partner].data();
                for ch in 0..c {
                    for y in area.y..area.y + area.height {
                        for x in area.x..area.x + area.width {
                            dst[ch * plane + y * size + x] = src[ch * plane + y * size + x];
                        }
                    }
                }
                records[i].mix = Some(Mix::CutMix { partner, area });
            }
            MixMode::Mixup => {
                let lambda = rng.gen_range(0.5f32..=1.0);
                let src = views[partner].data();
                for (d, s) in out[i].data_mut().iter_mut().zip(src) {
                    *d = lambda * *d + (1.0 - lambda) * s;
                }
                records[i].mix = Some(Mix::Mixup { partner, lambda });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, size, size], |_| rng.gen())
    }

    fn threshold(t: &Tensor) -> LabelMap {
        let s = t.shape()[1];
        LabelMap::new(s, s, t.data().iter().map(|&v| (v > 0.5) as u8 + (v > 0.8) as u8).collect()).unwrap()
    }

    #[test]
    fn identity_record_is_identity() {
        let x = image(8, 0);
        let r = AugmentationRecord::identity(8);
        assert_eq!(apply_geometric(&r.geometric, &x).unwrap(), x);
        let y = threshold(&x);
        assert_eq!(apply_to_label(&r, &y, None).unwrap(), y);
    }

    #[test]
    fn half_turn_is_an_involution() {
        let x = image(8, 1);
        let geo = Geometric {
            rotation: 2,
            ..Geometric::identity(8)
        };
        let once = apply_geometric(&geo, &x).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply_geometric(&geo, &once).unwrap(), x);
        let flip = Geometric {
            flip_h: true,
            flip_v: true,
            ..Geometric::identity(8)
        };
        let y = threshold(&x);
        let rec = AugmentationRecord {
            geometric: flip,
            intensity: None,
            mix: None,
        };
        let twice = apply_to_label(&rec, &apply_to_label(&rec, &y, None).unwrap(), None).unwrap();
        assert_eq!(twice, y);
    }

    #[test]
    fn quarter_turn_moves_corner_clockwise() {
        let mut x = Tensor::zeros([1, 3, 3]);
        x.data_mut()[0] = 1.0; // top-left
        let geo = Geometric {
            rotation: 1,
            ..Geometric::identity(3)
        };
        let r = apply_geometric(&geo, &x).unwrap();
        assert_eq!(r.data()[2], 1.0); // top-right
    }

    #[test]
    fn full_frame_geometry_preserves_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = AugmentParams {
            crop_scale_min: 1.0,
            ..AugmentParams::default()
        };
        let x = image(16, 2);
        let y = threshold(&x);
        for _ in 0..20 {
            let (_, rec) = weak_view(&x, &params, &mut rng).unwrap();
            assert!(rec.geometric.is_full_frame(16));
            let t = apply_to_label(&rec, &y, None).unwrap();
            assert_eq!(t.histogram(3), y.histogram(3));
        }
    }

    #[test]
    fn labels_follow_images_for_any_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = AugmentParams::default();
        for seed in 0..30 {
            let x = image(16, seed);
            let (view, rec) = weak_view(&x, &params, &mut rng).unwrap();
            let moved = apply_to_label(&rec, &threshold(&x), None).unwrap();
            assert_eq!(moved, threshold(&view));
            let (again, _) = (apply_geometric(&rec.geometric, &x).unwrap(), ());
            assert_eq!(again, view);
        }
    }

    #[test]
    fn strong_view_without_intensity_equals_weak() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = AugmentParams {
            intensity: false,
            ..AugmentParams::default()
        };
        let x = image(16, 3);
        let (weak, rec) = weak_view(&x, &params, &mut rng).unwrap();
        let (strong, srec) = strong_view(&x, Some(&rec), &params, &mut rng).unwrap();
        assert_eq!(weak, strong);
        assert_eq!(srec.geometric, rec.geometric);
        assert!(strong_view(&x, None, &params, &mut rng).is_err());
    }

    #[test]
    fn intensity_keeps_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = image(16, 4);
        let params = AugmentParams {
            blur_prob: 1.0,
            ..AugmentParams::default()
        };
        for _ in 0..10 {
            let ops = sample_intensity(&params, &mut rng);
            assert!(ops.blur_sigma.is_some());
            let y = apply_intensity(&ops, &x).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let blurred = gaussian_blur(&Tensor::full([1, 8, 8], 0.3), 1.2).unwrap();
        assert!(blurred.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn cutmix_labels_follow_the_box() {
        let own = LabelMap::filled(8, 8, 1);
        let partner = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        let area = MixBox {
            y: 2,
            x: 3,
            height: 3,
            width: 4,
        };
        let rec = AugmentationRecord {
            geometric: Geometric::identity(8),
            intensity: None,
            mix: Some(Mix::CutMix { partner: 1, area }),
        };
        let mixed = apply_to_label(&rec, &own, Some(&partner)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if area.contains(y, x) { partner.get(y, x) } else { 1 };
                assert_eq!(mixed.get(y, x), expected);
            }
        }
        let empty = AugmentationRecord {
            mix: Some(Mix::CutMix {
                partner: 1,
                area: MixBox { height: 0, ..area },
            }),
            ..rec
        };
        assert_eq!(apply_to_label(&empty, &own, Some(&partner)).unwrap(), own);
    }

    #[test]
    fn mix_batch_images_match_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let views: Vec<Tensor> = (0..4).map(|s| image(16, 10 + s)).collect();
        let mut recs = vec![AugmentationRecord::identity(16); 4];
        let params = AugmentParams {
            mix_prob: 1.0,
            ..AugmentParams::default()
        };
        let mixed = mix_batch(&views, &mut recs, &params, &mut rng).unwrap();
        for (i, r) in recs.iter().enumerate() {
            let Some(Mix::CutMix { partner, area }) = r.mix else {
                panic!("expected cutmix");
            };
            assert_ne!(partner, i);
            for p in 0..256 {
                let src = if area.contains(p / 16, p % 16) { &views[partner] } else { &views[i] };
                assert_eq!(mixed[i].data()[p], src.data()[p]);
            }
        }
    }
}
