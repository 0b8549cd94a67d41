//! Multi-run drivers and checkpoint evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::manifest::MANIFEST_FILE;
use crate::data::{load_checkpoint, pnm, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_sample, MetricsRow, METRICS_HEADER};
use crate::train::config::TrainConfig;
use crate::train::trainer::{predict_all, EpochReport, TrainSummary, Trainer};

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// FNV-1a over the sorted id list, as a short fingerprint.
pub fn ids_fingerprint(ids: &[String]) -> String {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in sorted {
        for b in id.bytes().chain(std::iter::once(0)) {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub use_l_org: bool,
    pub use_l_syn: bool,
    pub summary: TrainSummary,
    /// Mean masked fraction over all steps; zero when no unlabeled loss
    /// was active.
    pub mean_masked_fraction: f64,
    pub test_ids: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str = "run,use_l_org,use_l_syn,best_epoch,val_dsc,test_dsc,test_asd,mean_masked_fraction,test_ids";

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.name,
                r.use_l_org,
                r.use_l_syn,
                r.summary.best_epoch,
                r.summary.best_val_dsc,
                r.summary.test.mean_dsc,
                r.summary.test.mean_asd,
                r.mean_masked_fraction,
                r.test_ids
            );
        }
        s
    }

    pub fn row(&self, use_l_org: bool, use_l_syn: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.use_l_org == use_l_org && r.use_l_syn == use_l_syn)
    }
}

/// Run name for a pair of loss switches.
pub fn run_name(use_l_org: bool, use_l_syn: bool) -> &'static str {
    match (use_l_org, use_l_syn) {
        (false, false) => "baseline",
        (true, false) => "l_org",
        (false, true) => "l_syn",
        (true, true) => "l_org+l_syn",
    }
}

fn run_variant(
    base: &TrainConfig,
    data: &Dataset,
    use_l_org: bool,
    use_l_syn: bool,
    track: bool,
    progress: &mut impl FnMut(&str, &EpochReport),
) -> Result<TrainSummary> {
    let name = run_name(use_l_org, use_l_syn);
    let mut cfg = base.clone();
    cfg.use_l_org = use_l_org;
    cfg.use_l_syn = use_l_syn;
    cfg.track_consistency = track;
    cfg.out_dir = base.out_dir.join(name);
    if let Some(d) = &base.dump_synth {
        cfg.dump_synth = Some(d.join(name));
    }
    let mut t = Trainer::new(cfg, data.clone())?;
    t.fit(|r| progress(name, r))
}

/// The 2×2 grid over the two unlabeled loss terms with identical seeds
/// and data. Writes `ablation.csv` under the base `out_dir`.
pub fn ablate(base: &TrainConfig, mut progress: impl FnMut(&str, &EpochReport)) -> Result<AblationReport> {
    let data = Dataset::load(&base.manifest)?;
    base.validate()?;
    base.check_manifest(&data.manifest)?;
    let test_ids = ids_fingerprint(&data.split()?.test);
    let mut rows = Vec::new();
    for (o, s) in [(false, false), (true, false), (false, true), (true, true)] {
        let summary = run_variant(base, &data, o, s, base.track_consistency, &mut progress)?;
        let steps: usize = summary.epochs.len();
        let mean_masked = summary.epochs.iter().map(|e| e.mean_masked_fraction).sum::<f64>() / steps.max(1) as f64;
        rows.push(AblationRow {
            name: run_name(o, s).to_string(),
            use_l_org: o,
            use_l_syn: s,
            summary,
            mean_masked_fraction: mean_masked,
            test_ids: test_ids.clone(),
        });
    }
    let report = AblationReport { rows };
    write_file(&base.out_dir.join("ablation.csv"), &report.csv())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRow {
    pub epoch: usize,
    pub mode: String,
    pub dice_syn_pseudo: f64,
    pub dice_pseudo_gt: f64,
}

pub const CONSISTENCY_HEADER: &str = "epoch,mode,dice_syn_pseudo,dice_pseudo_gt";

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTrack {
    pub rows: Vec<ConsistencyRow>,
    pub synmatch: TrainSummary,
    pub fixmatch: TrainSummary,
}

impl ConsistencyTrack {
    pub fn csv(&self) -> String {
        let mut s = format!("{CONSISTENCY_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{},{:.6},{:.6}\n", r.epoch, r.mode, r.dice_syn_pseudo, r.dice_pseudo_gt);
        }
        s
    }

    pub fn mode(&self, mode: &str) -> Vec<&ConsistencyRow> {
        self.rows.iter().filter(|r| r.mode == mode).collect()
    }
}

/// Train a SynMatch run and a FixMatch-mode run (strong-weak term only)
/// with per-epoch consistency measurement. Writes `consistency.csv`.
pub fn consistency_track(base: &TrainConfig, mut progress: impl FnMut(&str, &EpochReport)) -> Result<ConsistencyTrack> {
    let data = Dataset::load(&base.manifest)?;
    base.validate()?;
    base.check_manifest(&data.manifest)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (mode, o, s) in [("synmatch", true, true), ("fixmatch", true, false)] {
        let summary = run_variant(base, &data, o, s, true, &mut progress)?;
        for e in &summary.epochs {
            let c = e
                .consistency
                .ok_or_else(|| Error::Config("consistency needs unlabeled samples with ground truth".into()))?;
            rows.push(ConsistencyRow {
                epoch: e.epoch,
                mode: mode.to_string(),
                dice_syn_pseudo: c.dice_syn_pseudo,
                dice_pseudo_gt: c.dice_pseudo_gt,
            });
        }
        summaries.push(summary);
    }
    let fixmatch = summaries.pop().expect("two runs");
    let synmatch = summaries.pop().expect("two runs");
    let track = ConsistencyTrack { rows, synmatch, fixmatch };
    write_file(&base.out_dir.join("consistency.csv"), &track.csv())?;
    Ok(track)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_sample: Vec<MetricsRow>,
    pub aggregate: MetricsRow,
}

impl Evaluation {
    pub fn csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in self.per_sample.iter().chain(std::iter::once(&self.aggregate)) {
            s += &r.csv_line();
            s.push('\n');
        }
        s
    }
}

/// Pick the manifest for `data`, which is either a manifest file or a
/// dataset directory. In a directory, `all` uses the raw manifest; split
/// parts use the split the checkpoint was trained on, or the only split
/// file present.
pub fn resolve_manifest(data: &Path, split: &str, meta: &serde_json::Value) -> Result<PathBuf> {
    if !data.is_dir() {
        return Ok(data.to_path_buf());
    }
    if split == "all" {
        return Ok(data.join(MANIFEST_FILE));
    }
    if let Some(name) = meta.get("manifest").and_then(|v| v.as_str()) {
        let p = data.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    let mut splits: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| Error::io(data, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("split-") && n.ends_with(".json"))
        })
        .collect();
    match splits.len() {
        1 => Ok(splits.pop().expect("one split")),
        0 => Err(Error::Config(format!("no split manifest in {}; run `synmatch split` first", data.display()))),
        n => Err(Error::Config(format!(
            "{n} split manifests in {}; pass the one to use as --data",
            data.display()
        ))),
    }
}

/// Evaluate a checkpoint on a split part (`labeled`, `unlabeled`, `val`,
/// `test`) or on every sample with ground truth (`all`). `data` is a
/// manifest file or dataset directory (see [`resolve_manifest`]).
/// Predictions are optionally written as raw-valued PGMs into `dump`.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path, split: &str, dump: Option<&PathBuf>) -> Result<Evaluation> {
    let ck = load_checkpoint(ckpt)?;
    let data = Dataset::load(&resolve_manifest(data, split, &ck.meta)?)?;
    let m = &data.manifest;
    if ck.model.num_classes != m.num_classes || ck.model.in_channels != m.channels {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes from {} channels, dataset has {} classes and {} channels",
            ck.model.num_classes, ck.model.in_channels, m.num_classes, m.channels
        )));
    }
    ck.model.check_input(&[1, m.channels, m.image_size, m.image_size])?;
    let model = ck.build_model()?;
    let ids: Vec<String> = match (split, &m.split) {
        ("all", _) => m.samples.iter().filter(|s| s.gt_label.is_some()).map(|s| s.id.clone()).collect(),
        ("labeled", Some(s)) => s.labeled.clone(),
        ("unlabeled", Some(s)) => s.unlabeled.clone(),
        ("val", Some(s)) => s.val.clone(),
        ("test", Some(s)) => s.test.clone(),
        (other, _) => {
            return Err(Error::Config(format!(
                "cannot evaluate split `{other}` (use all, or a split manifest with labeled/unlabeled/val/test)"
            )))
        }
    };
    let items = data.part(&ids)?;
    let images: Vec<_> = items.iter().map(|it| &it.image).collect();
    let preds = predict_all(&model, &images, 16)?;
    let epoch = ck.meta.get("best_epoch").or_else(|| ck.meta.get("epoch")).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut per_sample = Vec::new();
    let mut scores = Vec::new();
    for (it, p) in items.iter().zip(&preds) {
        let gt = it.gt.as_ref().ok_or_else(|| Error::Config(format!("sample `{}` has no ground truth", it.id)))?;
        let sc = score_sample(p, gt, m.num_classes)?;
        per_sample.push(aggregate(std::slice::from_ref(&sc), epoch, &format!("{split}:{}", it.id))?);
        scores.push(sc);
        if let Some(dir) = dump {
            pnm::write_label(&dir.join(format!("{}.pgm", it.id)), p)?;
        }
    }
    let aggregate = aggregate(&scores, epoch, split)?;
    Ok(Evaluation { per_sample, aggregate })
}

/// Write an evaluation's CSV to `out` or stdout.
pub fn emit(eval: &Evaluation, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_file(p, &eval.csv()),
        None => std::io::stdout()
            .write_all(eval.csv().as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}
