//! Dataset manifests, split construction and in-memory loading.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::pnm;
use crate::data::scribble::derive_scribbles;
use crate::data::synthetic::{generate_sample, GenConfig};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Share of samples held out for validation and for test.
pub const VAL_FRACTION: f64 = 0.1;
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Dense,
    Scribble,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Ssl,
    Wsl,
    Bsl,
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssl" => Ok(Setting::Ssl),
            "wsl" => Ok(Setting::Wsl),
            "bsl" => Ok(Setting::Bsl),
            _ => Err(Error::Config(format!("unknown setting `{s}` (expected ssl, wsl or bsl)"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Ssl => "ssl",
            Setting::Wsl => "wsl",
            Setting::Bsl => "bsl",
        })
    }
}

/// One image. `label` is the training annotation of kind `label_kind`;
/// `gt_label` and `scribble` record what is available on disk and are
/// never used as training targets for unlabeled samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: String,
    pub label_kind: LabelKind,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub gt_label: Option<String>,
    #[serde(default)]
    pub scribble: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub setting: Option<Setting>,
    #[serde(default)]
    pub labeled_fraction: Option<f64>,
    #[serde(default)]
    pub split: Option<Split>,
}

fn one() -> usize {
    1
}

impl DatasetManifest {
    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("manifest: {m}")));
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate sample id `{}`", s.id));
            }
            if (s.label_kind == LabelKind::None) != s.label.is_none() {
                return bad(format!("sample `{}`: label kind {:?} with label {:?}", s.id, s.label_kind, s.label));
            }
        }
        let Some(split) = &self.split else { return Ok(()) };
        let mut seen = HashSet::new();
        for (part, list) in [
            ("labeled", &split.labeled),
            ("unlabeled", &split.unlabeled),
            ("val", &split.val),
            ("test", &split.test),
        ] {
            for id in list {
                if !ids.contains(id.as_str()) {
                    return bad(format!("{part} id `{id}` has no sample"));
                }
                if !seen.insert(id.as_str()) {
                    return bad(format!("id `{id}` appears in more than one split"));
                }
            }
        }
        let kind = |id: &String| self.sample(id).map(|s| s.label_kind);
        let Some(setting) = self.setting else {
            return bad("split present without a setting".into());
        };
        let want = match setting {
            Setting::Ssl => LabelKind::Dense,
            Setting::Wsl | Setting::Bsl => LabelKind::Scribble,
        };
        if let Some(id) = split.labeled.iter().find(|id| kind(id) != Some(want)) {
            return bad(format!("{setting} labeled sample `{id}` is not {want:?}"));
        }
        if let Some(id) = split.unlabeled.iter().find(|id| kind(id) != Some(LabelKind::None)) {
            return bad(format!("unlabeled sample `{id}` carries a training label"));
        }
        if let Some(id) = split.val.iter().chain(&split.test).find(|id| kind(id) != Some(LabelKind::Dense)) {
            return bad(format!("evaluation sample `{id}` lacks a dense label"));
        }
        match setting {
            Setting::Wsl if !split.unlabeled.is_empty() => bad("wsl split has unlabeled samples".into()),
            Setting::Bsl if split.unlabeled.is_empty() => bad("bsl split has no unlabeled samples".into()),
            _ if split.labeled.is_empty() => bad("split has no labeled samples".into()),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Write images, dense labels, derived scribbles and `manifest.json` under
/// `out`. Paths in the manifest are relative to `out`.
pub fn generate_synthetic_dataset(out: &Path, cfg: &GenConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for d in ["images", "labels", "scribbles"] {
        create_dir(&out.join(d))?;
    }
    let width = cfg.n.max(1).to_string().len().max(4);
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (image, dense) = generate_sample(cfg, i)?;
        let scribble = derive_scribbles(&dense, &mut stream_rng(cfg.seed ^ 0x5C21_BB1E, i as u64));
        let id = format!("{i:0width$}");
        let (ip, lp, sp) = (
            format!("images/{id}.pgm"),
            format!("labels/{id}.pgm"),
            format!("scribbles/{id}.pgm"),
        );
        pnm::write(&out.join(&ip), &pnm::raster_from_tensor(&image)?)?;
        pnm::write_label(&out.join(&lp), &dense)?;
        pnm::write_label(&out.join(&sp), &scribble)?;
        samples.push(Sample {
            id,
            image: ip,
            label_kind: LabelKind::Dense,
            label: Some(lp.clone()),
            gt_label: Some(lp),
            scribble: Some(sp),
        });
    }
    let manifest = DatasetManifest {
        num_classes: cfg.classes,
        image_size: cfg.size,
        channels: 1,
        samples,
        setting: None,
        labeled_fraction: None,
        split: None,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Choose `count` of `ids` so each stratum keeps its share, largest
/// remainders breaking ties in stratum order.
fn stratified_take(
    ids: &[String],
    stratum: &HashMap<String, usize>,
    count: usize,
    rng: &mut impl rand::Rng,
) -> (Vec<String>, Vec<String>) {
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for id in ids {
        groups.entry(stratum[id]).or_default().push(id.clone());
    }
    for g in groups.values_mut() {
        g.shuffle(rng);
    }
    let n = ids.len() as f64;
    let mut quota: Vec<(usize, usize, f64)> = groups
        .iter()
        .map(|(&k, g)| {
            let exact = count as f64 * g.len() as f64 / n;
            (k, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut left = count - quota.iter().map(|q| q.1).sum::<usize>();
    let mut by_rem: Vec<usize> = (0..quota.len()).collect();
    by_rem.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for i in by_rem {
        if left == 0 {
            break;
        }
        quota[i].1 += 1;
        left -= 1;
    }
    let (mut take, mut rest) = (Vec::new(), Vec::new());
    for (k, q, _) in quota {
        let g = &groups[&k];
        take.extend_from_slice(&g[..q]);
        rest.extend_from_slice(&g[q..]);
    }
    (take, rest)
}

fn dominant_class(label: &LabelMap, classes: usize) -> usize {
    let h = label.histogram(classes);
    (1..classes).max_by_key(|&k| (h[k], std::cmp::Reverse(k))).unwrap_or(0)
}

/// Partition `base` (reading its dense labels under `root`) into
/// validation, test and training ids, then pick the labeled subset.
///
/// The validation/test partition depends only on `seed`, so splits built
/// for different settings or fractions share their evaluation ids.
pub fn build_split(
    base: &DatasetManifest,
    root: &Path,
    setting: Setting,
    labeled_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!("labeled fraction {labeled_fraction} outside (0, 1]")));
    }
    match setting {
        Setting::Wsl if labeled_fraction < 1.0 => {
            return Err(Error::Config(format!(
                "wsl requires labeled fraction 1.0, got {labeled_fraction}"
            )))
        }
        Setting::Bsl if labeled_fraction >= 1.0 => {
            return Err(Error::Config("bsl requires labeled fraction below 1.0".into()))
        }
        _ => {}
    }
    let mut stratum = HashMap::new();
    for s in &base.samples {
        let path = s
            .gt_label
            .as_ref()
            .ok_or_else(|| Error::Config(format!("sample `{}` has no dense label to split on", s.id)))?;
        stratum.insert(s.id.clone(), dominant_class(&pnm::read_label(&root.join(path))?, base.num_classes));
        if setting != Setting::Ssl && s.scribble.is_none() {
            return Err(Error::Config(format!("sample `{}` has no scribble for {setting}", s.id)));
        }
    }
    let mut ids: Vec<String> = base.samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    let n = ids.len();
    let n_val = (n as f64 * VAL_FRACTION).round() as usize;
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let mut part_rng = stream_rng(seed, 0);
    let (val, rest) = stratified_take(&ids, &stratum, n_val, &mut part_rng);
    let (test, train) = stratified_take(&rest, &stratum, n_test, &mut part_rng);
    let n_lab = ((train.len() as f64 * labeled_fraction).round() as usize).clamp(1, train.len());
    let (labeled, unlabeled) = stratified_take(&train, &stratum, n_lab, &mut stream_rng(seed, 1));
    if setting == Setting::Bsl && unlabeled.is_empty() {
        return Err(Error::Config("bsl split left no unlabeled samples".into()));
    }

    let labeled_set: HashSet<&String> = labeled.iter().collect();
    let unlabeled_set: HashSet<&String> = unlabeled.iter().collect();
    let samples = base
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if labeled_set.contains(&s.id) {
                if setting == Setting::Ssl {
                    s.label_kind = LabelKind::Dense;
                    s.label = s.gt_label.clone();
                } else {
                    s.label_kind = LabelKind::Scribble;
                    s.label = s.scribble.clone();
                }
            } else if unlabeled_set.contains(&s.id) {
                s.label_kind = LabelKind::None;
                s.label = None;
            } else {
                s.label_kind = LabelKind::Dense;
                s.label = s.gt_label.clone();
            }
            s
        })
        .collect();
    let sorted = |mut v: Vec<String>| {
        v.sort();
        v
    };
    let m = DatasetManifest {
        samples,
        setting: Some(setting),
        labeled_fraction: Some(labeled_fraction),
        split: Some(Split {
            labeled: sorted(labeled),
            unlabeled: sorted(unlabeled),
            val: sorted(val),
            test: sorted(test),
        }),
        ..base.clone()
    };
    m.validate()?;
    Ok(m)
}

/// Conventional file name for a split manifest.
pub fn split_file_name(setting: Setting, fraction: f64, seed: u64) -> String {
    format!("split-{setting}-{:03}-s{seed}.json", (fraction * 100.0).round() as u32)
}

/// A decoded sample.
#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub label: Option<LabelMap>,
    pub gt: Option<LabelMap>,
}

/// All images and labels of a split manifest, decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Load `path`; sample paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: DatasetManifest, root: PathBuf) -> Result<Self> {
        manifest.validate()?;
        let (size, classes) = (manifest.image_size, manifest.num_classes);
        let read_label = |p: &Option<String>, allow_ignore: bool| -> Result<Option<LabelMap>> {
            let Some(p) = p else { return Ok(None) };
            let path = root.join(p);
            let l = pnm::read_label(&path)?;
            if (l.height, l.width) != (size, size) {
                return Err(Error::format(path.display().to_string(), format!("label is not {size}x{size}")));
            }
            let ok = |v: u8| (v as usize) < classes || (allow_ignore && v == crate::label::IGNORE);
            if let Some(v) = l.data.iter().find(|&&v| !ok(v)) {
                return Err(Error::format(path.display().to_string(), format!("label value {v} out of range")));
            }
            Ok(Some(l))
        };
        let mut items = Vec::with_capacity(manifest.samples.len());
        let mut index = HashMap::new();
        for s in &manifest.samples {
            let path = root.join(&s.image);
            let raster = pnm::read(&path)?;
            if (raster.height, raster.width, raster.channels) != (size, size, manifest.channels) {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("image is {}x{}x{}, manifest says {size}x{size}x{}", raster.channels, raster.height, raster.width, manifest.channels),
                ));
            }
            index.insert(s.id.clone(), items.len());
            items.push(Item {
                id: s.id.clone(),
                image: pnm::tensor_from_raster(&raster),
                label: read_label(&s.label, s.label_kind == LabelKind::Scribble)?,
                gt: read_label(&s.gt_label, false)?,
            });
        }
        Ok(Self { manifest, root, items, index })
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    /// Items of one split part, in manifest order of the id list.
    pub fn part(&self, ids: &[String]) -> Result<Vec<&Item>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Config(format!("unknown sample id `{id}`"))))
            .collect()
    }

    pub fn split(&self) -> Result<&Split> {
        self.manifest
            .split
            .as_ref()
            .ok_or_else(|| Error::Config("manifest has no split; run the split step first".into()))
    }
}
