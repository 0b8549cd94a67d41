//! Dice similarity, average surface distance and semantic-consistency
//! measurements.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::synthesis::synthesize_batch;
use crate::tensor::Tensor;
use crate::unet::{argmax_labels, UNetModel};

/// `2|P∩G| / (|P|+|G|)`, and 1.0 when both sets are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    pred.same_size(gt, "dice_score")?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Mean Dice over classes `1..classes`.
pub fn mean_foreground_dice(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 1..classes {
        total += dice_score(pred, gt, c as u8)?;
    }
    Ok(total / (classes - 1).max(1) as f64)
}

/// Class pixels with at least one 4-neighbour outside the class. Pixels on
/// the image border count as boundary (their outside neighbour is off-image).
pub fn boundary(map: &LabelMap, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = (map.height, map.width);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && map.get(y as usize, x as usize) == class
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !inside(yi - 1, xi) || !inside(yi + 1, xi) || !inside(yi, xi - 1) || !inside(yi, xi + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Which empty-mask rule, if any, produced a surface distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyCase {
    /// Neither mask has the class: distance 0.
    Both,
    /// Exactly one mask has the class: distance is the image diagonal.
    One,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistance {
    pub value: f64,
    pub empty: Option<EmptyCase>,
}

fn directed_mean(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric average surface distance in pixels: the mean of the two
/// directed mean nearest-boundary Euclidean distances.
pub fn average_surface_distance(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<SurfaceDistance> {
    pred.same_size(gt, "average_surface_distance")?;
    let a = boundary(pred, class);
    let b = boundary(gt, class);
    let (value, empty) = match (a.is_empty(), b.is_empty()) {
        (true, true) => (0.0, Some(EmptyCase::Both)),
        (true, false) | (false, true) => (
            ((pred.height * pred.height + pred.width * pred.width) as f64).sqrt(),
            Some(EmptyCase::One),
        ),
        (false, false) => ((directed_mean(&a, &b) + directed_mean(&b, &a)) / 2.0, None),
    };
    Ok(SurfaceDistance { value, empty })
}

/// Aggregated evaluation outcome for one (epoch, split).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    /// Mean over samples, one entry per foreground class.
    pub class_dsc: Vec<f64>,
    pub class_asd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_asd: f64,
    pub dice_syn_pseudo: Option<f64>,
    pub dice_pseudo_gt: Option<f64>,
    /// How many (sample, class) surface distances used each empty rule.
    pub asd_empty_both: usize,
    pub asd_empty_one: usize,
    pub samples: usize,
}

pub const METRICS_HEADER: &str = "epoch,split,samples,mean_dsc,mean_asd,class_dsc,class_asd,dice_syn_pseudo,dice_pseudo_gt,asd_empty_both,asd_empty_one";

fn joined(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.samples,
            self.mean_dsc,
            self.mean_asd,
            joined(&self.class_dsc),
            joined(&self.class_asd),
            opt(self.dice_syn_pseudo),
            opt(self.dice_pseudo_gt),
            self.asd_empty_both,
            self.asd_empty_one
        )
    }

    pub fn write_csv(rows: &[MetricsRow], mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in rows {
            writeln!(out, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

/// Per-sample scores before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub dsc: Vec<f64>,
    pub asd: Vec<SurfaceDistance>,
}

impl SampleScores {
    pub fn mean_dsc(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len().max(1) as f64
    }

    pub fn mean_asd(&self) -> f64 {
        self.asd.iter().map(|a| a.value).sum::<f64>() / self.asd.len().max(1) as f64
    }
}

pub fn score_sample(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<SampleScores> {
    let mut dsc = Vec::with_capacity(classes - 1);
    let mut asd = Vec::with_capacity(classes - 1);
    for c in 1..classes as u8 {
        dsc.push(dice_score(pred, gt, c)?);
        asd.push(average_surface_distance(pred, gt, c)?);
    }
    Ok(SampleScores { dsc, asd })
}

/// Average per-sample scores into a row.
pub fn aggregate(scores: &[SampleScores], epoch: usize, split: &str) -> Result<MetricsRow> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Config(format!("no samples to evaluate in split `{split}`")))?;
    let k = first.dsc.len();
    let n = scores.len() as f64;
    let mut class_dsc = vec![0.0; k];
    let mut class_asd = vec![0.0; k];
    let (mut both, mut one) = (0, 0);
    for s in scores {
        for c in 0..k {
            class_dsc[c] += s.dsc[c] / n;
            class_asd[c] += s.asd[c].value / n;
            match s.asd[c].empty {
                Some(EmptyCase::Both) => both += 1,
                Some(EmptyCase::One) => one += 1,
                None => {}
            }
        }
    }
    Ok(MetricsRow {
        epoch,
        split: split.to_string(),
        mean_dsc: class_dsc.iter().sum::<f64>() / k.max(1) as f64,
        mean_asd: class_asd.iter().sum::<f64>() / k.max(1) as f64,
        class_dsc,
        class_asd,
        dice_syn_pseudo: None,
        dice_pseudo_gt: None,
        asd_empty_both: both,
        asd_empty_one: one,
        samples: scores.len(),
    })
}

/// Mean foreground Dice between predictions on synthesized images and the
/// pseudo labels they were built from, and between those pseudo labels and
/// the held-back ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyScores {
    pub dice_syn_pseudo: f64,
    pub dice_pseudo_gt: f64,
    pub samples: usize,
}

/// Measure consistency over unlabeled `images` (`[C, H, W]` each) with
/// ground truth used for measurement only. Pseudo labels come from the
/// unaugmented image.
pub fn consistency_report(
    model: &UNetModel,
    images: &[&Tensor],
    gt: &[&LabelMap],
    batch: usize,
    rng: &mut impl Rng,
) -> Result<ConsistencyScores> {
    if images.len() != gt.len() || images.is_empty() {
        return Err(Error::Config(format!(
            "consistency needs matching non-empty sets, got {} images and {} labels",
            images.len(),
            gt.len()
        )));
    }
    let classes = model.config.num_classes;
    let (mut syn, mut pg) = (0.0, 0.0);
    for (chunk, gts) in images.chunks(batch.max(1)).zip(gt.chunks(batch.max(1))) {
        let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
        let x = Tensor::stack(&owned)?;
        let taps = model.forward_with_taps(&x)?;
        let pseudo = argmax_labels(&taps.logits)?;
        let synth = synthesize_batch(&taps, &x, rng)?;
        let pred = model.predict(&synth.images)?;
        for i in 0..chunk.len() {
            syn += mean_foreground_dice(&pred[i], &pseudo[i], classes)?;
            pg += mean_foreground_dice(&pseudo[i], gts[i], classes)?;
        }
    }
    let n = images.len() as f64;
    Ok(ConsistencyScores {
        dice_syn_pseudo: syn / n,
        dice_pseudo_gt: pg / n,
        samples: images.len(),
    })
}

/// Random masks for metric oracles and examples.
pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> LabelMap {
    LabelMap {
        height: h,
        width: w,
        data: (0..h * w).map(|_| rng.gen_bool(density) as u8).collect(),
    }
}
