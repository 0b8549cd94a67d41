//! Experiment configuration.
//!
//! Files are either JSON or flat `key = value` lines where nested fields
//! use dotted keys (`model.base_channels = 8`, `augment.mix_mode = mixup`).
//! Blank lines and lines starting with `#` are skipped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentParams;
use crate::data::{DatasetManifest, Setting};
use crate::error::{Error, Result};
use crate::loss::DEFAULT_TAU;
use crate::optim::AdamWConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Split manifest to train on.
    pub manifest: PathBuf,
    /// Directory receiving logs and checkpoints.
    pub out_dir: PathBuf,
    pub setting: Setting,
    pub labeled_fraction: f64,
    pub tau: f32,
    pub epochs: usize,
    /// Iterations per epoch; `0` means one pass over the unlabeled pool
    /// (or over the labeled set when there is no pool).
    pub iterations_per_epoch: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub image_size: usize,
    /// Seeds model initialization and every per-step random stream.
    pub seed: u64,
    pub use_l_org: bool,
    pub use_l_syn: bool,
    /// Measure pseudo-label consistency on the unlabeled set each epoch.
    pub track_consistency: bool,
    /// Cap on unlabeled samples used for consistency; `0` uses all.
    pub consistency_samples: usize,
    /// Write (image, synthesized, pseudo label) triplets here once per epoch.
    pub dump_synth: Option<PathBuf>,
    pub eval_batch: usize,
    pub augment: AugmentParams,
    pub model: UNetConfig,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            out_dir: PathBuf::from("runs/default"),
            setting: Setting::Bsl,
            labeled_fraction: 0.1,
            tau: DEFAULT_TAU,
            epochs: 60,
            iterations_per_epoch: 0,
            batch_labeled: 8,
            batch_unlabeled: 8,
            image_size: 64,
            seed: 0,
            use_l_org: true,
            use_l_syn: true,
            track_consistency: false,
            consistency_samples: 0,
            dump_synth: None,
            eval_batch: 16,
            augment: AugmentParams::default(),
            model: UNetConfig::default(),
            optim: AdamWConfig::default(),
        }
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    let raw = raw.trim();
    *node = match node {
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        Value::Object(_) => return Err(Error::Config(format!("`{key}` is a section, set its fields instead"))),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.trim_matches('"').to_string())),
    };
    Ok(())
}

impl TrainConfig {
    /// Parse JSON (when the text starts with `{`) or flat key=value lines.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let cfg: TrainConfig = serde_json::from_str(text)?;
            return Ok(cfg);
        }
        let mut cfg = TrainConfig::default();
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.to_string()));
        }
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    /// Override fields by dotted key.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        for (k, raw) in pairs {
            set_path(&mut v, k, raw)?;
        }
        *self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Load a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.out_dir);
        if let Some(d) = cfg.dump_synth.as_mut() {
            resolve(d);
        }
        Ok(cfg)
    }

    /// Flat key=value rendering that [`TrainConfig::parse`] reads back.
    pub fn to_kv(&self) -> Result<String> {
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(m) => {
                    for (k, v) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
                other => out.push_str(&format!("{prefix} = {other}\n")),
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.01) {
            return bad(format!("tau {} outside (0, 1.01]", self.tau));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("labeled_fraction {} outside (0, 1]", self.labeled_fraction));
        }
        if self.setting == Setting::Wsl && self.labeled_fraction != 1.0 {
            return bad("wsl requires labeled_fraction = 1".into());
        }
        if self.epochs == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 || self.eval_batch == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.optim.lr) || self.optim.lr == 0.0 {
            return bad(format!("learning rate {} outside (0, 1)", self.optim.lr));
        }
        self.model.validate()?;
        self.model.check_input(&[1, self.model.in_channels, self.image_size, self.image_size])
    }

    /// Errors unless the manifest was built for this configuration.
    pub fn check_manifest(&self, m: &DatasetManifest) -> Result<()> {
        let mismatch = |what: &str, c: String, mv: String| {
            Err(Error::Config(format!("config {what} is {c} but the manifest has {mv}")))
        };
        match m.setting {
            Some(s) if s == self.setting => {}
            s => return mismatch("setting", self.setting.to_string(), format!("{s:?}")),
        }
        match m.labeled_fraction {
            Some(f) if (f - self.labeled_fraction).abs() < 1e-9 => {}
            f => return mismatch("labeled_fraction", self.labeled_fraction.to_string(), format!("{f:?}")),
        }
        if m.image_size != self.image_size {
            return mismatch("image_size", self.image_size.to_string(), m.image_size.to_string());
        }
        if m.num_classes != self.model.num_classes {
            return mismatch("model.num_classes", self.model.num_classes.to_string(), m.num_classes.to_string());
        }
        if m.channels != self.model.in_channels {
            return mismatch("model.in_channels", self.model.in_channels.to_string(), m.channels.to_string());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_reach_nested_fields() {
        let cfg = TrainConfig::parse(
            "# comment\nsetting = ssl\nlabeled_fraction = 0.05\nmodel.base_channels = 8\naugment.mix_mode = mixup\ndump_synth = out/s\nuse_l_syn=false\n",
        )
        .unwrap();
        assert_eq!(cfg.setting, Setting::Ssl);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.augment.mix_mode, crate::augment::MixMode::Mixup);
        assert_eq!(cfg.dump_synth, Some(PathBuf::from("out/s")));
        assert!(!cfg.use_l_syn);
    }

    #[test]
    fn kv_and_json_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply([("optim.lr", "0.001"), ("seed", "7")]).unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_kv().unwrap()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        assert!(TrainConfig::parse("modle.depth = 3").unwrap_err().to_string().contains("modle.depth"));
        assert!(TrainConfig::parse("epochs = many").is_err());
        assert!(TrainConfig::parse("model = 3").is_err());
        assert!(TrainConfig::parse("{\"epoch\": 3}").is_err());
        let wsl = TrainConfig::parse("setting = wsl\nlabeled_fraction = 0.5").unwrap();
        assert!(wsl.validate().is_err());
        let tau = TrainConfig::parse("tau = 1.5").unwrap();
        assert!(tau.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
