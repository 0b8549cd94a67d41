//! Supervised and confidence-masked unsupervised objectives.
//!
//! The segmentation criterion is `(CE + DiceLoss) / 2`, where CE is the
//! per-pixel cross entropy and DiceLoss is one minus the mean soft Dice
//! over foreground classes. Scribble supervision uses cross entropy on
//! annotated pixels only.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::label::{flatten, LabelMap, IGNORE};
use crate::tensor::Tensor;

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Default confidence threshold for pseudo supervision.
pub const DEFAULT_TAU: f32 = 0.95;

fn check_batch(graph: &Graph, logits: Var, labels: &[LabelMap], op: &'static str) -> Result<(usize, usize)> {
    let (n, c, h, w) = graph.value(logits).dims4(op)?;
    if labels.len() != n || labels.iter().any(|l| (l.height, l.width) != (h, w)) {
        return Err(Error::shape(
            op,
            format!("logits [{n},{c},{h},{w}] do not match {} label maps", labels.len()),
        ));
    }
    Ok((n * h * w, c))
}

/// `(CE + DiceLoss) / 2` over the pixels selected by `weights`. CE is
/// normalized by the total pixel count, so unselected pixels count as zero
/// loss; Dice statistics exclude them.
pub fn masked_ce_dice(graph: &mut Graph, logits: Var, targets: &[u8], weights: &[f32]) -> Result<Var> {
    let pixels = targets.len() as f32;
    let ce = graph.cross_entropy(logits, targets, weights, pixels)?;
    let dice = graph.soft_dice(logits, targets, weights, DICE_SMOOTH)?;
    let sum = graph.add(ce, dice)?;
    Ok(graph.scale(sum, 0.5))
}

/// Joint cross-entropy and Dice loss against dense labels.
pub fn ce_dice_loss(graph: &mut Graph, logits: Var, labels: &[LabelMap]) -> Result<Var> {
    let (pixels, classes) = check_batch(graph, logits, labels, "ce_dice_loss")?;
    let targets = flatten(labels);
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::shape(
            "ce_dice_loss",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    masked_ce_dice(graph, logits, &targets, &vec![1.0; pixels])
}

/// Cross entropy averaged over annotated (non-[`IGNORE`]) pixels. Returns
/// the loss and the annotated fraction; with no annotated pixel the loss is
/// exactly zero.
pub fn partial_ce_loss(graph: &mut Graph, logits: Var, scribbles: &[LabelMap]) -> Result<(Var, f64)> {
    let (pixels, _) = check_batch(graph, logits, scribbles, "partial_ce_loss")?;
    let targets = flatten(scribbles);
    let weights: Vec<f32> = targets.iter().map(|&t| (t != IGNORE) as u8 as f32).collect();
    let annotated = weights.iter().filter(|&&w| w > 0.0).count();
    let loss = graph.cross_entropy(logits, &targets, &weights, annotated as f32)?;
    Ok((loss, annotated as f64 / pixels as f64))
}

/// Which supervised criterion a labeled batch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    Dense,
    Scribble,
}

pub fn supervised_loss(graph: &mut Graph, logits: Var, labels: &[LabelMap], kind: Supervision) -> Result<Var> {
    match kind {
        Supervision::Dense => ce_dice_loss(graph, logits, labels),
        Supervision::Scribble => partial_ce_loss(graph, logits, labels).map(|(l, _)| l),
    }
}

/// Hard pseudo labels and their max-softmax confidences, computed without
/// gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<LabelMap>,
    pub confidence: Vec<Vec<f32>>,
}

impl PseudoLabelBatch {
    /// Argmax and max probability per pixel of `[N, C, H, W]` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (n, c, h, w) = logits.dims4("pseudo_label")?;
        let plane = h * w;
        let probs = crate::autodiff::kernels::softmax_channels(n, c, plane, logits.data());
        let mut labels = Vec::with_capacity(n);
        let mut confidence = Vec::with_capacity(n);
        for i in 0..n {
            let mut lab = vec![0u8; plane];
            let mut conf = vec![0.0f32; plane];
            for p in 0..plane {
                let (mut best, mut bp) = (0, f32::NEG_INFINITY);
                for k in 0..c {
                    let v = probs[(i * c + k) * plane + p];
                    if v > bp {
                        best = k;
                        bp = v;
                    }
                }
                lab[p] = best as u8;
                conf[p] = bp;
            }
            labels.push(LabelMap::new(h, w, lab)?);
            confidence.push(conf);
        }
        Ok(Self { labels, confidence })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indicator weights `conf ≥ tau`, flattened over the batch.
    pub fn mask(&self, tau: f32) -> Vec<f32> {
        self.confidence
            .iter()
            .flat_map(|c| c.iter().map(move |&p| (p >= tau) as u8 as f32))
            .collect()
    }

    pub fn masked_fraction(&self, tau: f32) -> f64 {
        let m = self.mask(tau);
        m.iter().filter(|&&w| w > 0.0).count() as f64 / m.len().max(1) as f64
    }
}

/// Confidence-masked `(CE + Dice)/2` of `logits` against pseudo targets.
pub fn pseudo_supervised_loss(graph: &mut Graph, logits: Var, targets: &PseudoLabelBatch, tau: f32) -> Result<Var> {
    check_batch(graph, logits, &targets.labels, "unsup_loss")?;
    let flat = flatten(&targets.labels);
    masked_ce_dice(graph, logits, &flat, &targets.mask(tau))
}

/// The two unsupervised terms. `strong_targets` are the pseudo labels
/// carried through the strong view's mixing; `synth_targets` are the
/// unmixed pseudo labels the synthesized images were built to match.
pub fn unsup_loss(
    graph: &mut Graph,
    strong_logits: Var,
    synth_logits: Var,
    strong_targets: &PseudoLabelBatch,
    synth_targets: &PseudoLabelBatch,
    tau: f32,
) -> Result<(Var, Var)> {
    let org = pseudo_supervised_loss(graph, strong_logits, strong_targets, tau)?;
    let syn = pseudo_supervised_loss(graph, synth_logits, synth_targets, tau)?;
    Ok((org, syn))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_s: f32,
    pub l_org: f32,
    pub l_syn: f32,
    pub l_total: f32,
    pub masked_fraction: f64,
}

/// `L = L_s + L_org + L_syn`, with absent terms contributing nothing.
pub fn total_loss(
    graph: &mut Graph,
    l_s: Var,
    l_org: Option<Var>,
    l_syn: Option<Var>,
    masked_fraction: f64,
) -> Result<(Var, LossReport)> {
    let mut total = l_s;
    for term in [l_org, l_syn].into_iter().flatten() {
        total = graph.add(total, term)?;
    }
    let item = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).data()[0]).unwrap_or(0.0);
    let report = LossReport {
        l_s: graph.value(l_s).data()[0],
        l_org: item(graph, l_org),
        l_syn: item(graph, l_syn),
        l_total: graph.value(total).data()[0],
        masked_fraction,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn peaked(labels: &[LabelMap], classes: usize, margin: f32) -> Tensor {
        let (h, w) = (labels[0].height, labels[0].width);
        let plane = h * w;
        Tensor::from_fn([labels.len(), classes, h, w], |i| {
            let (n, k, p) = (i / (classes * plane), (i / plane) % classes, i % plane);
            if labels[n].data[p] as usize == k {
                margin
            } else {
                0.0
            }
        })
    }

    fn random_labels(n: usize, size: usize, classes: u8, rng: &mut ChaCha8Rng) -> Vec<LabelMap> {
        (0..n)
            .map(|_| LabelMap::new(size, size, (0..size * size).map(|_| rng.gen_range(0..classes)).collect()).unwrap())
            .collect()
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Var) -> f32 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item().unwrap()
    }

    #[test]
    fn near_perfect_prediction_has_tiny_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = random_labels(2, 8, 3, &mut rng);
        let logits = peaked(&labels, 3, 20.0);
        let l = eval(|g| {
            let x = g.constant(logits);
            ce_dice_loss(g, x, &labels).unwrap()
        });
        assert!(l < 0.01, "{l}");
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let labels = vec![LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap()];
        let ce = eval(|g| {
            let x = g.constant(Tensor::zeros([1, 2, 2, 2]));
            g.cross_entropy(x, &labels[0].data, &[1.0; 4], 4.0).unwrap()
        });
        assert!((ce - std::f32::consts::LN_2).abs() < 1e-4);
    }

    /// Straight-line reference: softmax, CE, soft Dice in f64.
    fn reference_ce_dice(logits: &Tensor, labels: &[LabelMap]) -> f64 {
        let s = logits.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let x = logits.data();
        let mut ce = 0.0;
        let mut inter = vec![0.0; c];
        let mut pm = vec![0.0; c];
        let mut gm = vec![0.0; c];
        for b in 0..n {
            for p in 0..plane {
                let z: Vec<f64> = (0..c).map(|k| x[(b * c + k) * plane + p] as f64).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                let t = labels[b].data[p] as usize;
                ce -= (e[t] / tot).ln();
                for k in 0..c {
                    let prob = e[k] / tot;
                    let g = (k == t) as u8 as f64;
                    inter[k] += prob * g;
                    pm[k] += prob;
                    gm[k] += g;
                }
            }
        }
        ce /= (n * plane) as f64;
        let dice: f64 = (1..c)
            .map(|k| (2.0 * inter[k] + DICE_SMOOTH) / (pm[k] + gm[k] + DICE_SMOOTH))
            .sum::<f64>()
            / (c - 1) as f64;
        0.5 * (ce + 1.0 - dice)
    }

    #[test]
    fn ce_dice_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let labels = random_labels(2, 6, 4, &mut rng);
            let logits = Tensor::from_fn([2, 4, 6, 6], |_| rng.gen_range(-3.0..3.0));
            let got = eval(|g| {
                let x = g.constant(logits.clone());
                ce_dice_loss(g, x, &labels).unwrap()
            });
            let want = reference_ce_dice(&logits, &labels);
            assert!((got as f64 - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn ce_dice_rejects_out_of_range_labels() {
        let labels = vec![LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap()];
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 3, 2, 2]));
        assert!(ce_dice_loss(&mut g, x, &labels).is_err());
    }

    #[test]
    fn partial_ce_edge_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([1, 3, 2, 2], |i| i as f32 * 0.1));
        let none = vec![LabelMap::filled(2, 2, IGNORE)];
        let (l, frac) = partial_ce_loss(&mut g, x, &none).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        assert_eq!(frac, 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));

        let one = vec![LabelMap::new(2, 2, vec![IGNORE, 2, IGNORE, IGNORE]).unwrap()];
        let (l, frac) = partial_ce_loss(&mut g, x, &one).unwrap();
        assert_eq!(frac, 0.25);
        // pixel 1 logits: 0.1, 0.5, 0.9
        let z = [0.1f64, 0.5, 0.9];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((g.value(l).item().unwrap() as f64 - (lse - 0.9)).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_on_a_stripe_scribble() {
        let mut dense = LabelMap::filled(8, 8, 0);
        for y in 0..8 {
            for x in 2..5 {
                dense.set(y, x, 1);
            }
        }
        let mut scribble = LabelMap::filled(8, 8, IGNORE);
        for y in 1..7 {
            scribble.set(y, 3, 1);
            scribble.set(y, 6, 0);
        }
        let logits = peaked(std::slice::from_ref(&dense), 2, 15.0);
        let l = eval(|g| {
            let x = g.constant(logits);
            partial_ce_loss(g, x, &[scribble]).unwrap().0
        });
        assert!(l < 0.01, "{l}");
    }

    fn pseudo_batch(rng: &mut ChaCha8Rng) -> (Tensor, PseudoLabelBatch) {
        let weak = Tensor::from_fn([2, 3, 6, 6], |_| rng.gen_range(-4.0..4.0));
        let plb = PseudoLabelBatch::from_logits(&weak).unwrap();
        (weak, plb)
    }

    #[test]
    fn pseudo_labels_are_confident_argmaxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (weak, plb) = pseudo_batch(&mut rng);
        assert_eq!(plb, PseudoLabelBatch::from_logits(&weak).unwrap());
        for conf in &plb.confidence {
            assert!(conf.iter().all(|&p| p >= 1.0 / 3.0 - 1e-6 && p <= 1.0));
        }
    }

    #[test]
    fn thresholds_bound_the_unsupervised_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, plb) = pseudo_batch(&mut rng);
        let strong = Tensor::from_fn([2, 3, 6, 6], |_| rng.gen_range(-2.0..2.0));
        let synth = Tensor::from_fn([2, 3, 6, 6], |_| rng.gen_range(-2.0..2.0));

        let mut g = Graph::new();
        let s = g.param(strong.clone());
        let y = g.param(synth.clone());
        let (org, syn) = unsup_loss(&mut g, s, y, &plb, &plb, 1.01).unwrap();
        assert_eq!(g.value(org).item().unwrap(), 0.0);
        assert_eq!(g.value(syn).item().unwrap(), 0.0);
        let both = g.add(org, syn).unwrap();
        g.backward(both).unwrap();
        assert!(g.grad(s).unwrap().data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let s = g.constant(strong);
        let (org, _) = unsup_loss(&mut g, s, s, &plb, &plb, 0.0).unwrap();
        let full = ce_dice_loss(&mut g, s, &plb.labels).unwrap();
        assert!((g.value(org).item().unwrap() - g.value(full).item().unwrap()).abs() < 1e-6);

        let mut last = 1.0;
        for tau in [0.0, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.01] {
            let f = plb.masked_fraction(tau);
            assert!(f <= last);
            last = f;
        }
        assert_eq!(plb.masked_fraction(0.0), 1.0);
        assert_eq!(plb.masked_fraction(1.01), 0.0);
    }

    #[test]
    fn total_is_the_sum_of_terms() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.3));
        let b = g.constant(Tensor::scalar(0.1));
        let c = g.constant(Tensor::scalar(0.2));
        let (_, r) = total_loss(&mut g, a, Some(b), Some(c), 0.5).unwrap();
        assert!((r.l_total - 0.6).abs() < 1e-6);
        let (_, r) = total_loss(&mut g, a, None, None, 0.0).unwrap();
        assert_eq!(r.l_total, r.l_s);
    }

    #[test]
    fn total_gradient_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, plb) = pseudo_batch(&mut rng);
        let labels = random_labels(2, 6, 3, &mut rng);
        let x = Tensor::from_fn([2, 3, 6, 6], |_| rng.gen_range(-2.0..2.0));
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let ls = ce_dice_loss(&mut g, v, &labels).unwrap();
            let (o, s) = unsup_loss(&mut g, v, v, &plb, &plb, 0.5).unwrap();
            let loss = match which {
                0 => ls,
                1 => o,
                2 => s,
                _ => total_loss(&mut g, ls, Some(o), Some(s), 0.0).unwrap().0,
            };
            g.backward(loss).unwrap();
            g.grad(v).unwrap()
        };
        let (a, b, c, t) = (grad_of(0), grad_of(1), grad_of(2), grad_of(3));
        for i in 0..t.numel() {
            let sum = a.data()[i] + b.data()[i] + c.data()[i];
            assert!((sum - t.data()[i]).abs() < 1e-6);
        }
    }
}
