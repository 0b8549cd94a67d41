//! End-to-end acceptance checks. Runs as a plain binary (no libtest
//! harness) and prints one PASS/FAIL line per criterion.
//!
//! Artifacts (datasets, logs, checkpoints) are kept under
//! `target/tmp/acceptance` for inspection.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synmatch::autodiff::gradcheck::{random_tensor, GradCheck};
use synmatch::autodiff::{Graph, Var};
use synmatch::data::manifest::split_file_name;
use synmatch::data::{build_split, generate_synthetic_dataset, load_checkpoint, save_checkpoint, Dataset, GenConfig, Setting};
use synmatch::label::LabelMap;
use synmatch::loss::{masked_ce_dice, total_loss, unsup_loss, PseudoLabelBatch};
use synmatch::metrics::{average_surface_distance, dice_score, EmptyCase};
use synmatch::synthesis::{luma, luminance_merge, reduce_feature, synthesize, synthesize_batch};
use synmatch::train::{ablate, consistency_track, TrainConfig, Trainer};
use synmatch::unet::{UNetConfig, UNetModel};
use synmatch::Tensor;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---- 1: gradients ------------------------------------------------------

const FD_SEEDS: u64 = 20;
const FD_TOLERANCE: f64 = 1e-3;

/// Move values within `margin` of zero out of the way of the ReLU kink,
/// where the derivative is undefined.
fn off_kink(mut t: Tensor, margin: f32) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(*v) * 2.0 + *v;
        }
    }
    t
}

/// Uniform values in [-1, 1] whose pairwise gaps all exceed the FD step,
/// so every pooling window has a unique maximum under perturbation.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * (i as f32 + rng.gen_range(0.25..0.75)) / n as f32).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

type Primitive = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> synmatch::Result<Var>>)>;

/// The losses reduce to one f32 scalar, whose rounding enters the central
/// difference at about `pixels · 3e-5` relative to the gradient for
/// `eps = 1e-3`, so their inputs cover few pixels.
fn primitives() -> Vec<(&'static str, Primitive)> {
    let pixel_targets = |rng: &mut ChaCha8Rng, n: usize, c: u8| -> (Vec<u8>, Vec<f32>) {
        let t = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut w: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
        w[0] = 1.0;
        (t, w)
    };
    vec![
        (
            "conv2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let stride = rng.gen_range(1..=2);
                let inputs = vec![
                    random_tensor(&[2, 3, 6, 6], rng),
                    random_tensor(&[4, 3, 3, 3], rng),
                    random_tensor(&[4], rng),
                ];
                (inputs, Box::new(move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), stride, 1)) as _)
            }),
        ),
        (
            "max_pool2",
            Box::new(|rng: &mut ChaCha8Rng| (vec![distinct(&[2, 3, 6, 6], rng)], Box::new(|g: &mut Graph, v: &[Var]| g.max_pool2(v[0])) as _)),
        ),
        (
            "upsample",
            Box::new(|rng: &mut ChaCha8Rng| {
                (vec![random_tensor(&[2, 3, 4, 5], rng)], Box::new(|g: &mut Graph, v: &[Var]| g.upsample_bilinear2(v[0])) as _)
            }),
        ),
        (
            "group_norm",
            Box::new(|rng: &mut ChaCha8Rng| {
                let inputs = vec![random_tensor(&[2, 4, 4, 4], rng), random_tensor(&[4], rng), random_tensor(&[4], rng)];
                (inputs, Box::new(|g: &mut Graph, v: &[Var]| g.group_norm(v[0], 2, v[1], v[2], 1e-5)) as _)
            }),
        ),
        (
            "relu",
            Box::new(|rng: &mut ChaCha8Rng| {
                (vec![off_kink(random_tensor(&[2, 3, 5, 5], rng), 5e-3)], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.relu(v[0]))) as _)
            }),
        ),
        (
            "softmax",
            Box::new(|rng: &mut ChaCha8Rng| {
                (vec![random_tensor(&[2, 4, 3, 3], rng)], Box::new(|g: &mut Graph, v: &[Var]| g.softmax_channels(v[0])) as _)
            }),
        ),
        (
            "cross_entropy",
            Box::new(move |rng: &mut ChaCha8Rng| {
                let (t, w) = pixel_targets(rng, 4, 3);
                let norm = w.iter().sum::<f32>().max(1.0);
                (
                    vec![random_tensor(&[1, 3, 2, 2], rng)],
                    Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &t, &w, norm)) as _,
                )
            }),
        ),
        (
            "soft_dice",
            Box::new(move |rng: &mut ChaCha8Rng| {
                let (t, w) = pixel_targets(rng, 4, 3);
                (
                    vec![random_tensor(&[1, 3, 2, 2], rng)],
                    Box::new(move |g: &mut Graph, v: &[Var]| g.soft_dice(v[0], &t, &w, 1.0)) as _,
                )
            }),
        ),
    ]
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst_all = Vec::new();
    for (name, make) in primitives() {
        let mut worst = 0.0f64;
        for seed in 0..FD_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (inputs, f) = make(&mut rng);
            let check = GradCheck { eps: 1e-3, max_coords: 64, seed };
            let diff = vec![true; inputs.len()];
            for r in ok(check.run(&inputs, &diff, |g, v| f(g, v)))? {
                ensure!(r.rel_error <= FD_TOLERANCE, "{name} seed {seed}: relative error {:.3e}", r.rel_error);
                worst = worst.max(r.rel_error);
            }
        }
        worst_all.push(format!("{name} {worst:.1e}"));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed <= Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{FD_SEEDS} seeds each, worst: {} ({:.1?})", worst_all.join(", "), elapsed))
}

// ---- 2: synthesis ------------------------------------------------------

fn synthesis_invariants() -> Outcome {
    let model = ok(UNetModel::init(UNetConfig::default(), 7))?;
    let gen = GenConfig::default();
    let images: Vec<Tensor> = ok((0..6).map(|i| generate_sample(&gen, i).map(|s| s.0)).collect::<Result<_, _>>())?;
    let batch = ok(Tensor::stack(&images))?;
    let params_before = model.parameter_count();
    let names_before: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let taps = ok(model.forward_with_taps(&batch))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let synth = ok(synthesize_batch(&taps, &batch, &mut rng))?;
    let t = ok(reduce_feature(&taps.texture))?;
    let s = ok(reduce_feature(&taps.shape))?;

    let plane = 64 * 64;
    let mut convex_dev = 0.0f32;
    for (i, &a) in synth.alphas.iter().enumerate() {
        ensure!((0.0..=1.0).contains(&a), "alpha {a}");
        for p in 0..plane {
            let k = i * plane + p;
            let expect = a * t.data()[k] + (1.0 - a) * s.data()[k];
            convex_dev = convex_dev.max((synth.images.data()[k] - expect).abs());
        }
    }
    ensure!(convex_dev <= 1e-6, "convex combination deviates by {convex_dev:e}");

    let (t0, s0) = (ok(t.narrow_batch(0, 1))?, ok(s.narrow_batch(0, 1))?);
    let at_one = ok(synthesize(&t0, &s0, 1.0))?.max_abs_diff(&t0);
    let at_zero = ok(synthesize(&t0, &s0, 0.0))?.max_abs_diff(&s0);
    ensure!(at_one == 0.0 && at_zero == 0.0, "endpoints differ by {at_one:e} / {at_zero:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rgb = Tensor::from_fn([3, 3, 16, 16], |_| rng.gen::<f32>());
    let p = 256;
    let y = Tensor::from_fn([3, 1, 16, 16], |i| {
        let (n, q) = (i / p, i % p);
        let d = rgb.data();
        luma(d[n * 3 * p + q], d[n * 3 * p + p + q], d[n * 3 * p + 2 * p + q])
    });
    let round_trip = ok(luminance_merge(&y, &rgb))?.max_abs_diff(&rgb);
    ensure!(round_trip <= 1e-5, "luminance round trip error {round_trip:e}");

    let names_after: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    ensure!(model.parameter_count() == params_before && names_after == names_before, "parameter registry changed");
    Ok(format!(
        "convex dev {convex_dev:.1e}, endpoints exact, luminance round trip {round_trip:.1e}, {params_before} parameters before and after"
    ))
}

fn generate_sample(cfg: &GenConfig, i: usize) -> synmatch::Result<(Tensor, LabelMap)> {
    synmatch::data::synthetic::generate_sample(cfg, i)
}

// ---- 3: masking --------------------------------------------------------

fn masking_semantics() -> Outcome {
    let model = ok(UNetModel::init(UNetConfig { base_channels: 8, ..UNetConfig::default() }, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([4, 1, 32, 32], |_| rng.gen::<f32>());
    let teacher = ok(model.forward_with_taps(&x))?;
    let targets = ok(PseudoLabelBatch::from_logits(&teacher.logits))?;
    let synth = ok(synthesize_batch(&teacher, &x, &mut rng))?;
    let max_conf = targets.confidence.iter().flatten().copied().fold(0.0f32, f32::max);

    let run = |tau: f32| -> Result<(f32, f32, Vec<Vec<f32>>), String> {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xs = g.constant(x.clone());
        let strong = ok(model.forward(&mut g, &bound, xs))?;
        let ss = g.constant(synth.images.clone());
        let syn = ok(model.forward(&mut g, &bound, ss))?;
        let (lo, ls) = ok(unsup_loss(&mut g, strong.logits, syn.logits, &targets, &targets, tau))?;
        let zero = g.constant(Tensor::scalar(0.0));
        let (total, report) = ok(total_loss(&mut g, zero, Some(lo), Some(ls), targets.masked_fraction(tau)))?;
        ok(g.backward(total))?;
        Ok((report.l_org, report.l_syn, model.params.take_grads(&mut g, &bound)))
    };

    ensure!(max_conf < 1.01, "max confidence {max_conf}");
    let (lo, ls, grads) = run(1.01)?;
    ensure!(lo == 0.0 && ls == 0.0, "tau 1.01 gave L_org {lo} L_syn {ls}");
    ensure!(grads.iter().flatten().all(|&v| v == 0.0), "nonzero gradient at tau 1.01");
    ensure!(targets.masked_fraction(1.01) == 0.0, "masked fraction above zero at tau 1.01");

    // tau = 0 equals the plain loss with every pixel selected.
    let (lo0, ls0, _) = run(0.0)?;
    let plain = |input: &Tensor| -> Result<f32, String> {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let v = g.constant(input.clone());
        let out = ok(model.forward(&mut g, &bound, v))?;
        let flat = synmatch::label::flatten(&targets.labels);
        let l = ok(masked_ce_dice(&mut g, out.logits, &flat, &vec![1.0; flat.len()]))?;
        Ok(g.value(l).data()[0])
    };
    let (po, ps) = (plain(&x)?, plain(&synth.images)?);
    ensure!(lo0 == po && ls0 == ps, "tau 0: {lo0} vs {po}, {ls0} vs {ps}");
    ensure!(targets.masked_fraction(0.0) == 1.0, "masked fraction below 1 at tau 0");

    let taus: Vec<f32> = (0..=101).map(|i| i as f32 / 100.0).collect();
    let fracs: Vec<f64> = taus.iter().map(|&t| targets.masked_fraction(t)).collect();
    ensure!(fracs.windows(2).all(|w| w[1] <= w[0]), "masked fraction not monotone");
    Ok(format!(
        "tau 1.01 zero loss and gradient; tau 0 matches unmasked ({po:.4}, {ps:.4}); masked fraction monotone over {} thresholds",
        taus.len()
    ))
}

// ---- 4: metric oracles -------------------------------------------------

fn oracle_dice(a: &LabelMap, b: &LabelMap, c: u8) -> f64 {
    let set = |m: &LabelMap| -> HashSet<(usize, usize)> {
        (0..m.height).flat_map(|y| (0..m.width).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x) == c).collect()
    };
    let (pa, pb) = (set(a), set(b));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    2.0 * pa.intersection(&pb).count() as f64 / (pa.len() + pb.len()) as f64
}

/// Boundary on a one-pixel padded copy, then all-pairs `hypot`.
fn oracle_asd(a: &LabelMap, b: &LabelMap, c: u8) -> f64 {
    let edge = |m: &LabelMap| -> Vec<(f64, f64)> {
        let (h, w) = (m.height + 2, m.width + 2);
        let mut pad = vec![false; h * w];
        for y in 0..m.height {
            for x in 0..m.width {
                pad[(y + 1) * w + x + 1] = m.get(y, x) == c;
            }
        }
        let mut out = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                if pad[i] && !(pad[i - 1] && pad[i + 1] && pad[i - w] && pad[i + w]) {
                    out.push(((y - 1) as f64, (x - 1) as f64));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    match (ea.is_empty(), eb.is_empty()) {
        (true, true) => 0.0,
        (false, false) => {
            let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
                p.iter()
                    .map(|&(y, x)| q.iter().map(|&(v, u)| (y - v).hypot(x - u)).fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
                    / p.len() as f64
            };
            0.5 * (directed(&ea, &eb) + directed(&eb, &ea))
        }
        _ => (a.height as f64).hypot(a.width as f64),
    }
}

fn random_mask(rng: &mut ChaCha8Rng) -> LabelMap {
    let size = 16;
    let mut m = LabelMap::filled(size, size, 0);
    match rng.gen_range(0..4) {
        // scattered pixels
        0 => {
            let d = rng.gen_range(0.0..0.5);
            for v in m.data.iter_mut() {
                if rng.gen_bool(d) {
                    *v = rng.gen_range(1..3);
                }
            }
        }
        // blobs
        1 | 2 => {
            for _ in 0..rng.gen_range(1..4) {
                let (cy, cx) = (rng.gen_range(0.0..16.0f64), rng.gen_range(0.0..16.0f64));
                let r = rng.gen_range(1.0..6.0f64);
                let class = rng.gen_range(1..3);
                for y in 0..size {
                    for x in 0..size {
                        if (y as f64 - cy).hypot(x as f64 - cx) <= r {
                            m.set(y, x, class);
                        }
                    }
                }
            }
        }
        // empty
        _ => {}
    }
    m
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pairs = 300;
    let mut worst_asd = 0.0f64;
    let mut cases = [0usize; 3];
    for i in 0..pairs {
        let a = random_mask(&mut rng);
        let b = random_mask(&mut rng);
        for c in 1..3u8 {
            let d = ok(dice_score(&a, &b, c))?;
            let o = oracle_dice(&a, &b, c);
            ensure!(d == o, "pair {i} class {c}: dice {d} vs oracle {o}");
            let s = ok(average_surface_distance(&a, &b, c))?;
            let o = oracle_asd(&a, &b, c);
            ensure!((s.value - o).abs() <= 1e-9, "pair {i} class {c}: asd {} vs oracle {o}", s.value);
            worst_asd = worst_asd.max((s.value - o).abs());
            cases[match s.empty {
                None => 0,
                Some(EmptyCase::Both) => 1,
                Some(EmptyCase::One) => 2,
            }] += 1;
        }
    }
    let empty = LabelMap::filled(64, 64, 0);
    let mut one = empty.clone();
    one.set(10, 10, 1);
    ensure!(ok(dice_score(&empty, &empty, 1))? == 1.0, "empty dice");
    ensure!(ok(average_surface_distance(&empty, &empty, 1))?.value == 0.0, "both-empty asd");
    let pen = ok(average_surface_distance(&empty, &one, 1))?.value;
    ensure!((pen - 64.0 * 2f64.sqrt()).abs() <= 1e-6, "one-empty asd {pen}");
    ensure!(cases.iter().all(|&c| c > 0), "empty-case coverage {cases:?}");
    Ok(format!(
        "{pairs} pairs x 2 classes, dice exact, asd max dev {worst_asd:.1e}; nonempty/both-empty/one-empty cases {}/{}/{}",
        cases[0], cases[1], cases[2]
    ))
}

// ---- shared data for the training criteria -----------------------------

struct Corpus {
    dir: PathBuf,
}

impl Corpus {
    fn build(root: &Path) -> Result<Self, String> {
        let dir = root.join("data");
        let base = ok(generate_synthetic_dataset(&dir, &GenConfig::default()))?;
        for (s, f) in [(Setting::Ssl, 1.0), (Setting::Bsl, 0.1), (Setting::Bsl, 0.05)] {
            let m = ok(build_split(&base, &dir, s, f, 0))?;
            ok(m.save(&dir.join(split_file_name(s, f, 0))))?;
        }
        Ok(Self { dir })
    }

    fn split(&self, s: Setting, f: f64) -> PathBuf {
        self.dir.join(split_file_name(s, f, 0))
    }
}

fn base_config(manifest: PathBuf, out: PathBuf, setting: Setting, fraction: f64) -> TrainConfig {
    TrainConfig {
        manifest,
        out_dir: out,
        setting,
        labeled_fraction: fraction,
        ..TrainConfig::default()
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

// ---- 5: calibration ----------------------------------------------------

fn calibration(corpus: &Corpus, root: &Path) -> Outcome {
    let mut cfg = base_config(corpus.split(Setting::Ssl, 1.0), root.join("calibration"), Setting::Ssl, 1.0);
    cfg.use_l_org = false;
    cfg.use_l_syn = false;
    ensure!(cfg.epochs == 60, "calibration runs 60 epochs");
    let start = Instant::now();
    let mut t = ok(Trainer::from_config(cfg))?;
    let s = ok(t.fit(|_| {}))?;
    let elapsed = start.elapsed();
    ensure!(s.test.mean_dsc >= 0.90, "test mean DSC {}", pct(s.test.mean_dsc));
    ensure!(elapsed <= Duration::from_secs(20 * 60), "took {elapsed:?}");
    Ok(format!("test DSC {} (best epoch {}) in {:.1?}", pct(s.test.mean_dsc), s.best_epoch, elapsed))
}

// ---- 6: ablation -------------------------------------------------------

fn ablation_ordering(corpus: &Corpus, root: &Path) -> Outcome {
    let cfg = base_config(corpus.split(Setting::Bsl, 0.1), root.join("ablation"), Setting::Bsl, 0.1);
    let start = Instant::now();
    let report = ok(ablate(&cfg, |_, _| {}))?;
    let elapsed = start.elapsed();
    ensure!(report.rows.len() == 4, "{} rows", report.rows.len());
    ensure!(report.rows.iter().all(|r| r.test_ids == report.rows[0].test_ids), "rows evaluated on different ids");
    let dsc = |o, s| report.row(o, s).map(|r| r.summary.test.mean_dsc).unwrap();
    let (base, org, syn, both) = (dsc(false, false), dsc(true, false), dsc(false, true), dsc(true, true));
    let baseline_masked = report.row(false, false).unwrap().mean_masked_fraction;
    let detail = format!(
        "baseline {} L_org {} L_syn {} both {} ({:.1?})",
        pct(base),
        pct(org),
        pct(syn),
        pct(both),
        elapsed
    );
    ensure!(baseline_masked == 0.0, "baseline masked fraction {baseline_masked}; {detail}");
    ensure!(base < org && base < syn, "baseline not below single terms; {detail}");
    ensure!(both > org && both > syn, "combined run not the maximum; {detail}");
    ensure!(both - base >= 0.03, "gain {} points; {detail}", pct(both - base));
    ensure!(elapsed <= Duration::from_secs(90 * 60), "runtime over 90 min; {detail}");
    Ok(detail)
}

// ---- 7 and 8: BSL gap and consistency ----------------------------------

fn bsl_gap(track: &synmatch::train::ConsistencyTrack) -> Outcome {
    let (s, f) = (track.synmatch.test.mean_dsc, track.fixmatch.test.mean_dsc);
    let detail = format!("SynMatch {} vs FixMatch {}", pct(s), pct(f));
    ensure!(s - f >= 0.03, "gap {} points; {detail}", pct(s - f));
    Ok(detail)
}

fn consistency_trend(track: &synmatch::train::ConsistencyTrack) -> Outcome {
    let syn = track.mode("synmatch");
    let fix = track.mode("fixmatch");
    ensure!(!syn.is_empty() && syn.len() == fix.len(), "rows {} / {}", syn.len(), fix.len());
    let (first, last) = (syn[0].dice_pseudo_gt, syn[syn.len() - 1].dice_pseudo_gt);
    let fix_last = fix[fix.len() - 1].dice_pseudo_gt;
    let detail = format!(
        "SynMatch dice(pseudo, gt) epoch 1 {} -> final {}; FixMatch final {}; final dice(syn pred, pseudo) {} vs {}",
        pct(first),
        pct(last),
        pct(fix_last),
        pct(syn[syn.len() - 1].dice_syn_pseudo),
        pct(fix[fix.len() - 1].dice_syn_pseudo)
    );
    ensure!(last > first, "no upward trend; {detail}");
    ensure!(last >= fix_last, "below FixMatch; {detail}");
    Ok(detail)
}

// ---- 9: determinism and persistence ------------------------------------

fn determinism(root: &Path) -> Outcome {
    let dir = root.join("determinism");
    let data_dir = dir.join("data");
    let base = ok(generate_synthetic_dataset(&data_dir, &GenConfig { n: 40, size: 32, seed: 9, ..GenConfig::default() }))?;
    let split = ok(build_split(&base, &data_dir, Setting::Bsl, 0.25, 4))?;
    let manifest = data_dir.join(split_file_name(Setting::Bsl, 0.25, 4));
    ok(split.save(&manifest))?;
    let cfg = |out: &str| {
        let mut c = base_config(manifest.clone(), dir.join(out), Setting::Bsl, 0.25);
        c.image_size = 32;
        c.epochs = 2;
        c.iterations_per_epoch = 3;
        c.batch_labeled = 4;
        c.batch_unlabeled = 4;
        c.model.base_channels = 8;
        c.model.depth = 3;
        c.track_consistency = true;
        c
    };
    let read = |out: &str, f: &str| std::fs::read(dir.join(out).join(f)).map_err(|e| e.to_string());

    ok(ok(Trainer::from_config(cfg("run-a")))?.fit(|_| {}))?;
    ok(ok(Trainer::from_config(cfg("run-b")))?.fit(|_| {}))?;
    for f in ["metrics.csv", "train_log.csv"] {
        ensure!(read("run-a", f)? == read("run-b", f)?, "{f} differs between identical runs");
    }

    // Bitwise checkpoint round trip.
    let ckpt = dir.join("run-a").join("last.ckpt");
    let ck = ok(load_checkpoint(&ckpt))?;
    let model = ok(ck.build_model())?;
    let opt = ok(ck.optimizer.clone().ok_or("no optimizer state")?.restore(&model.params))?;
    let again = dir.join("again.ckpt");
    ok(save_checkpoint(&again, &model, Some(&opt), &ck.meta))?;
    ensure!(std::fs::read(&ckpt).unwrap() == std::fs::read(&again).unwrap(), "re-saved checkpoint differs");

    // One step after resuming equals one step of the uninterrupted run.
    let data = ok(Dataset::load(&manifest))?;
    let mut straight = ok(Trainer::from_config(cfg("run-c")))?;
    ok(straight.fit(|_| {}))?;
    let a = ok(straight.train_step())?;
    let mut resumed = ok(Trainer::resume(cfg("run-d"), data, &dir.join("run-c").join("last.ckpt")))?;
    let b = ok(resumed.train_step())?;
    ensure!(a == b, "step reports differ: {a:?} vs {b:?}");
    let same = straight
        .model
        .params
        .iter()
        .zip(resumed.model.params.iter())
        .all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    ensure!(same, "parameters differ after the resumed step");
    Ok("identical CSVs across runs, bitwise checkpoint round trip, resumed step matches".into())
}

// ---- driver ------------------------------------------------------------

fn main() {
    // `cargo test -- --list` and filters from the harness are not meaningful
    // here; listing prints nothing so tooling does not break.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // SYNMATCH_ACCEPTANCE_ONLY=1,2,9 runs a subset while iterating.
    let only: Option<Vec<u32>> = std::env::var("SYNMATCH_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let selected = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let root = work_dir();
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !selected(n) {
            println!("criterion {n} {name}: not selected");
            return;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let line = match &out {
            Ok(d) => format!("criterion {n} {name}: PASS - {d}"),
            Err(e) => format!("criterion {n} {name}: FAIL - {e}"),
        };
        println!("{line}");
        results.push((n, name, out, start.elapsed()));
    };

    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "synthesis invariants", &mut synthesis_invariants);
    run(3, "masking semantics", &mut masking_semantics);
    run(4, "metric oracles", &mut metric_oracles);
    let corpus = if (5..=8).any(selected) { Some(Corpus::build(&root).expect("acceptance dataset")) } else { None };
    let corpus = corpus.as_ref();
    run(5, "full-supervision calibration", &mut || calibration(corpus.unwrap(), &root));
    run(6, "ablation ordering", &mut || ablation_ordering(corpus.unwrap(), &root));
    let track = if selected(7) || selected(8) {
        let c = corpus.unwrap();
        let mut cfg = base_config(c.split(Setting::Bsl, 0.05), root.join("consistency"), Setting::Bsl, 0.05);
        cfg.track_consistency = true;
        consistency_track(&cfg, |_, _| {}).map_err(|e| e.to_string())
    } else {
        Err("not run".into())
    };
    run(7, "BSL gap", &mut || track.as_ref().map_err(Clone::clone).and_then(bsl_gap));
    run(8, "consistency trend", &mut || track.as_ref().map_err(Clone::clone).and_then(consistency_trend));
    run(9, "determinism and persistence", &mut || determinism(&root));

    println!();
    for (n, name, out, t) in &results {
        println!("{:>2} {:<30} {:<4} {:>8.1?}", n, name, if out.is_ok() { "PASS" } else { "FAIL" }, t);
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria run passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
