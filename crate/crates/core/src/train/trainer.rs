//! The per-iteration training loop, evaluation and checkpointing.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AugmentationRecord, Mix};
use crate::autodiff::Graph;
use crate::data::pnm::{self, Raster};
use crate::data::{load_checkpoint, save_checkpoint, Dataset, LabelKind, Setting};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::loss::{pseudo_supervised_loss, supervised_loss, total_loss, LossReport, PseudoLabelBatch, Supervision};
use crate::metrics::{aggregate, consistency_report, score_sample, ConsistencyScores, MetricsRow, METRICS_HEADER};
use crate::optim::AdamW;
use crate::rng::stream_rng;
use crate::synthesis::synthesize_batch;
use crate::tensor::Tensor;
use crate::train::config::TrainConfig;
use crate::train::worker_threads;
use crate::unet::{argmax_labels, UNetModel};

pub const TRAIN_LOG_HEADER: &str = "step,epoch,l_s,l_org,l_syn,l_total,masked_fraction";

pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_LOG: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

// Per-step random streams.
const RNG_LABELED_PICK: u64 = 0;
const RNG_LABELED_AUG: u64 = 1;
const RNG_UNLABELED_PICK: u64 = 2;
const RNG_WEAK: u64 = 3;
const RNG_STRONG: u64 = 4;
const RNG_MIX: u64 = 5;
const RNG_ALPHA: u64 = 6;
const RNG_STREAMS: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossReport,
    /// Operations recorded while pseudo labeling; always zero.
    pub pseudo_ops_recorded: usize,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.epoch, l.l_s, l.l_org, l.l_syn, l.l_total, l.masked_fraction
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_masked_fraction: f64,
    pub val: MetricsRow,
    pub consistency: Option<ConsistencyScores>,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Best checkpoint evaluated on the test split.
    pub test: MetricsRow,
    pub epochs: Vec<EpochReport>,
    pub out_dir: PathBuf,
}

fn partner(rec: &AugmentationRecord) -> Option<usize> {
    match rec.mix {
        Some(Mix::CutMix { partner, .. }) | Some(Mix::Mixup { partner, .. }) => Some(partner),
        None => None,
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: UNetModel,
    pub optimizer: AdamW,
    data: Dataset,
    labeled: Vec<usize>,
    pool: Vec<usize>,
    supervision: Supervision,
    step: u64,
    epoch: usize,
    best: Option<(usize, f64)>,
}

impl Trainer {
    /// Validate `config` against the dataset and initialize a fresh model.
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        config.check_manifest(&data.manifest)?;
        let split = data.split()?.clone();
        let index = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    data.items
                        .iter()
                        .position(|it| &it.id == id)
                        .ok_or_else(|| Error::Config(format!("unknown sample id `{id}`")))
                })
                .collect()
        };
        let labeled = index(&split.labeled)?;
        let mut pool = index(&split.unlabeled)?;
        if config.setting != Setting::Ssl {
            // scribbled images also serve as unlabeled data
            pool.extend(&labeled);
            pool.sort_unstable();
        }
        let supervision = match config.setting {
            Setting::Ssl => Supervision::Dense,
            _ => Supervision::Scribble,
        };
        for &i in &labeled {
            let kind = data.manifest.samples[i].label_kind;
            let ok = matches!(
                (supervision, kind),
                (Supervision::Dense, LabelKind::Dense) | (Supervision::Scribble, LabelKind::Scribble)
            );
            if !ok || data.items[i].label.is_none() {
                return Err(Error::Config(format!("labeled sample `{}` has no {supervision:?} label", data.items[i].id)));
            }
        }
        let model = UNetModel::init(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(config.optim, &model.params);
        Ok(Self { config, model, optimizer, data, labeled, pool, supervision, step: 0, epoch: 0, best: None })
    }

    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let data = Dataset::load(&config.manifest)?;
        Self::new(config, data)
    }

    /// Continue from a checkpoint written by [`Trainer::fit`] or
    /// [`Trainer::save`].
    pub fn resume(config: TrainConfig, data: Dataset, ckpt: &Path) -> Result<Self> {
        let mut t = Self::new(config, data)?;
        let ck = load_checkpoint(ckpt)?;
        ck.load_into(&mut t.model)?;
        t.optimizer = ck
            .optimizer
            .ok_or_else(|| Error::format(ckpt.display().to_string(), "checkpoint has no optimizer state"))?
            .restore(&t.model.params)?;
        let get = |k: &str| ck.meta.get(k).and_then(|v| v.as_u64());
        t.step = get("step").unwrap_or(t.optimizer.steps_taken());
        t.epoch = get("epoch").unwrap_or(0) as usize;
        t.best = match (get("best_epoch"), ck.meta.get("best_val_dsc").and_then(|v| v.as_f64())) {
            (Some(e), Some(d)) => Some((e as usize, d)),
            _ => None,
        };
        Ok(t)
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn unlabeled_pool(&self) -> &[usize] {
        &self.pool
    }

    fn unsupervised(&self) -> bool {
        (self.config.use_l_org || self.config.use_l_syn) && !self.pool.is_empty()
    }

    pub fn iterations_per_epoch(&self) -> usize {
        if self.config.iterations_per_epoch > 0 {
            return self.config.iterations_per_epoch;
        }
        let (n, b) = if self.pool.is_empty() {
            (self.labeled.len(), self.config.batch_labeled)
        } else {
            (self.pool.len(), self.config.batch_unlabeled)
        };
        n.div_ceil(b).max(1)
    }

    fn rng(&self, purpose: u64) -> ChaCha8Rng {
        stream_rng(self.config.seed, self.step * RNG_STREAMS + purpose)
    }

    fn pick(&self, from: &[usize], batch: usize, purpose: u64) -> Vec<usize> {
        let mut rng = self.rng(purpose);
        let k = batch.min(from.len());
        sample(&mut rng, from.len(), k).into_iter().map(|i| from[i]).collect()
    }

    /// One optimizer step on a fresh labeled and unlabeled batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let cfg = &self.config;
        let aug = &cfg.augment;
        let size = cfg.image_size;

        let lab = self.pick(&self.labeled, cfg.batch_labeled, RNG_LABELED_PICK);
        let mut rng = self.rng(RNG_LABELED_AUG);
        let (mut xl, mut yl) = (Vec::with_capacity(lab.len()), Vec::with_capacity(lab.len()));
        for &i in &lab {
            let item = &self.data.items[i];
            let (_, weak) = augment::weak_view(&item.image, aug, &mut rng)?;
            let (view, rec) = augment::strong_view(&item.image, Some(&weak), aug, &mut rng)?;
            let label = item.label.as_ref().expect("checked at construction");
            yl.push(augment::apply_to_label(&rec, label, None)?);
            xl.push(view);
        }

        let mut unsup = None;
        let mut pseudo_ops = 0;
        if self.unsupervised() {
            let un = self.pick(&self.pool, cfg.batch_unlabeled, RNG_UNLABELED_PICK);
            let mut wrng = self.rng(RNG_WEAK);
            let mut srng = self.rng(RNG_STRONG);
            let (mut weak, mut strong, mut records) = (Vec::new(), Vec::new(), Vec::new());
            for &i in &un {
                let img = &self.data.items[i].image;
                let (w, rec) = augment::weak_view(img, aug, &mut wrng)?;
                let (s, srec) = augment::strong_view(img, Some(&rec), aug, &mut srng)?;
                weak.push(w);
                strong.push(s);
                records.push(srec);
            }
            let strong = augment::mix_batch(&strong, &mut records, aug, &mut self.rng(RNG_MIX))?;
            let weak = Tensor::stack(&weak)?;

            let mut pg = Graph::no_grad();
            let taps = self.model.infer(&mut pg, &weak)?;
            pseudo_ops = pg.recorded_ops();
            if pseudo_ops != 0 {
                return Err(Error::Graph(format!("pseudo labeling recorded {pseudo_ops} ops")));
            }
            let plb = PseudoLabelBatch::from_logits(&taps.logits)?;
            let synth = synthesize_batch(&taps, &weak, &mut self.rng(RNG_ALPHA))?;

            let mut mixed = PseudoLabelBatch { labels: Vec::new(), confidence: Vec::new() };
            for (i, rec) in records.iter().enumerate() {
                let p = partner(rec);
                let own = &plb.labels[i].data;
                let labels = augment::mix_map(rec, size, own, p.map(|p| plb.labels[p].data.as_slice()));
                let conf = augment::mix_map(rec, size, &plb.confidence[i], p.map(|p| plb.confidence[p].as_slice()));
                mixed.labels.push(LabelMap::new(size, size, labels)?);
                mixed.confidence.push(conf);
            }
            self.maybe_dump(&weak, &synth.images, &plb)?;
            unsup = Some((Tensor::stack(&strong)?, mixed, synth, plb));
        }

        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let xv = g.constant(Tensor::stack(&xl)?);
        let out_l = self.model.forward(&mut g, &bound, xv)?;
        let l_s = supervised_loss(&mut g, out_l.logits, &yl, self.supervision)?;
        let (mut l_org, mut l_syn, mut masked) = (None, None, 0.0);
        if let Some((strong, mixed, synth, plb)) = &unsup {
            masked = plb.masked_fraction(cfg.tau);
            if cfg.use_l_org {
                let xu = g.constant(strong.clone());
                let out_u = self.model.forward(&mut g, &bound, xu)?;
                l_org = Some(pseudo_supervised_loss(&mut g, out_u.logits, mixed, cfg.tau)?);
            }
            if cfg.use_l_syn {
                let xs = g.constant(synth.images.clone());
                let out_s = self.model.forward(&mut g, &bound, xs)?;
                l_syn = Some(pseudo_supervised_loss(&mut g, out_s.logits, plb, cfg.tau)?);
            }
        }
        let (total, loss) = total_loss(&mut g, l_s, l_org, l_syn, masked)?;
        if !loss.l_total.is_finite() {
            return Err(Error::NonFinite { what: format!("loss at step {}", self.step) });
        }
        g.backward(total)?;
        let grads = self.model.params.take_grads(&mut g, &bound);
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(StepReport { step: self.step, epoch: self.epoch + 1, loss, pseudo_ops_recorded: pseudo_ops })
    }

    fn maybe_dump(&self, weak: &Tensor, synth: &Tensor, plb: &PseudoLabelBatch) -> Result<()> {
        let Some(dir) = &self.config.dump_synth else { return Ok(()) };
        if self.step % self.iterations_per_epoch() as u64 != 0 {
            return Ok(());
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let scale = 255 / (self.config.model.num_classes - 1).max(1) as u8;
        for i in 0..weak.shape()[0].min(4) {
            let stem = format!("e{:03}_{i}", self.epoch + 1);
            pnm::write(&dir.join(format!("{stem}_image.pgm")), &pnm::raster_from_tensor(&weak.narrow_batch(i, 1)?.reshape(weak.shape()[1..].to_vec())?)?)?;
            pnm::write(&dir.join(format!("{stem}_synth.pgm")), &pnm::raster_from_tensor(&synth.narrow_batch(i, 1)?.reshape(synth.shape()[1..].to_vec())?)?)?;
            let l = &plb.labels[i];
            let raster = Raster { width: l.width, height: l.height, channels: 1, data: l.data.iter().map(|&v| v * scale).collect() };
            pnm::write(&dir.join(format!("{stem}_pseudo.pgm")), &raster)?;
        }
        Ok(())
    }

    /// Predictions for the given items, in order.
    pub fn predict_items(&self, items: &[usize]) -> Result<Vec<LabelMap>> {
        predict_all(&self.model, &items.iter().map(|&i| &self.data.items[i].image).collect::<Vec<_>>(), self.config.eval_batch)
    }

    /// Score a split part against its dense labels.
    pub fn evaluate_ids(&self, ids: &[String], epoch: usize, split: &str) -> Result<MetricsRow> {
        let items = self.data.part(ids)?;
        let images: Vec<&Tensor> = items.iter().map(|it| &it.image).collect();
        let preds = predict_all(&self.model, &images, self.config.eval_batch)?;
        let classes = self.config.model.num_classes;
        let scores = items
            .iter()
            .zip(&preds)
            .map(|(it, p)| {
                let gt = it.gt.as_ref().ok_or_else(|| Error::Config(format!("sample `{}` has no ground truth", it.id)))?;
                score_sample(p, gt, classes)
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate(&scores, epoch, split)
    }

    /// Consistency over pure unlabeled samples (ground truth read for
    /// measurement only).
    pub fn consistency(&self) -> Result<Option<ConsistencyScores>> {
        let split = self.data.split()?;
        let mut items = self.data.part(&split.unlabeled)?;
        items.retain(|it| it.gt.is_some());
        if items.is_empty() {
            return Ok(None);
        }
        if self.config.consistency_samples > 0 {
            items.truncate(self.config.consistency_samples);
        }
        let images: Vec<&Tensor> = items.iter().map(|it| &it.image).collect();
        let gt: Vec<&LabelMap> = items.iter().map(|it| it.gt.as_ref().expect("retained")).collect();
        let mut rng = stream_rng(self.config.seed ^ 0xC0_15_15, self.epoch as u64);
        consistency_report(&self.model, &images, &gt, self.config.eval_batch, &mut rng).map(Some)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "step": self.step,
            "epoch": self.epoch,
            "best_epoch": self.best.map(|b| b.0),
            "best_val_dsc": self.best.map(|b| b.1),
            "seed": self.config.seed,
            "manifest": self.config.manifest.file_name().and_then(|n| n.to_str()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optimizer), &self.meta())
    }

    /// Run the remaining epochs, writing logs and checkpoints under
    /// `out_dir`, then evaluate the best checkpoint on the test split.
    pub fn fit(&mut self, mut progress: impl FnMut(&EpochReport)) -> Result<TrainSummary> {
        let out = self.config.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        std::fs::write(out.join("config.txt"), self.config.to_kv()?).map_err(|e| Error::io(&out, e))?;
        let fresh = self.step == 0;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = out.join(name);
            let file = if fresh {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).create(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let empty = file.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
            let mut w = BufWriter::new(file);
            if empty {
                writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(w)
        };
        let io = |e| Error::io(&out, e);
        let mut train_log = open(TRAIN_LOG, TRAIN_LOG_HEADER)?;
        let mut metrics_log = open(METRICS_LOG, METRICS_HEADER)?;
        let ipe = self.iterations_per_epoch();
        let val_ids = self.data.split()?.val.clone();
        let mut epochs = Vec::new();
        while self.epoch < self.config.epochs {
            let (mut loss, mut masked) = (0.0, 0.0);
            for _ in 0..ipe {
                let r = self.train_step()?;
                writeln!(train_log, "{}", r.csv_line()).map_err(io)?;
                loss += r.loss.l_total as f64;
                masked += r.loss.masked_fraction;
            }
            self.epoch += 1;
            let mut val = self.evaluate_ids(&val_ids, self.epoch, "val")?;
            let consistency = if self.config.track_consistency { self.consistency()? } else { None };
            if let Some(c) = consistency {
                val.dice_syn_pseudo = Some(c.dice_syn_pseudo);
                val.dice_pseudo_gt = Some(c.dice_pseudo_gt);
            }
            writeln!(metrics_log, "{}", val.csv_line()).map_err(io)?;
            train_log.flush().map_err(io)?;
            metrics_log.flush().map_err(io)?;
            let improved = self.best.map_or(true, |(_, d)| val.mean_dsc > d);
            if improved {
                self.best = Some((self.epoch, val.mean_dsc));
                self.save(&out.join(BEST_CKPT))?;
            }
            self.save(&out.join(LAST_CKPT))?;
            let report = EpochReport {
                epoch: self.epoch,
                mean_loss: loss / ipe as f64,
                mean_masked_fraction: masked / ipe as f64,
                val,
                consistency,
                improved,
            };
            progress(&report);
            epochs.push(report);
        }
        let (best_epoch, best_val_dsc) = self.best.ok_or_else(|| Error::Config("no epoch was run".into()))?;
        let best = load_checkpoint(&out.join(BEST_CKPT))?;
        let mut eval_model = self.model.clone();
        best.load_into(&mut eval_model)?;
        let test_ids = self.data.split()?.test.clone();
        let test = {
            let current = std::mem::replace(&mut self.model, eval_model);
            let row = self.evaluate_ids(&test_ids, best_epoch, "test");
            self.model = current;
            row?
        };
        writeln!(metrics_log, "{}", test.csv_line()).map_err(io)?;
        metrics_log.flush().map_err(io)?;
        Ok(TrainSummary { best_epoch, best_val_dsc, test, epochs, out_dir: out })
    }
}

/// Batched hard predictions, spread over `SYNMATCH_THREADS` workers.
/// Results do not depend on the worker count.
pub fn predict_all(model: &UNetModel, images: &[&Tensor], batch: usize) -> Result<Vec<LabelMap>> {
    let chunks: Vec<&[&Tensor]> = images.chunks(batch.max(1)).collect();
    let run = |chunk: &[&Tensor]| -> Result<Vec<LabelMap>> {
        let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
        let out = model.forward_with_taps(&Tensor::stack(&owned)?)?;
        argmax_labels(&out.logits)
    };
    let run = &run;
    let threads = worker_threads().min(chunks.len()).max(1);
    let results: Vec<Result<Vec<LabelMap>>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        std::thread::scope(|s| {
            let per = chunks.len().div_ceil(threads);
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut out = Vec::with_capacity(images.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
