//! Model and optimizer state as a named-tensor archive.
//!
//! Records: `model.config` and `meta` (UTF-8 JSON as u8 tensors),
//! `param/<name>` for every parameter in registry order, and when an
//! optimizer is saved `optim.config`, `optim.step` (u64 LE bytes),
//! `optim.m/<name>` and `optim.v/<name>`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::container::{load_archive, save_archive, TensorData};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::unet::{UNetConfig, UNetModel};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn restore(self, params: &ParamStore) -> Result<AdamW> {
        AdamW::from_state(self.config, params, self.step, self.first, self.second)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UNetConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub meta: serde_json::Value,
}

fn json_record(name: &str, v: &impl Serialize) -> Result<(String, TensorData)> {
    let data = serde_json::to_vec(v)?;
    Ok((name.to_string(), TensorData::U8 { shape: vec![data.len()], data }))
}

pub fn save_checkpoint(path: &Path, model: &UNetModel, optimizer: Option<&AdamW>, meta: &serde_json::Value) -> Result<()> {
    let mut records = vec![json_record("model.config", &model.config)?, json_record("meta", meta)?];
    for (name, t) in model.params.iter() {
        records.push((format!("param/{name}"), TensorData::F32(t.clone())));
    }
    if let Some(opt) = optimizer {
        records.push(json_record("optim.config", &opt.config)?);
        let step = opt.steps_taken().to_le_bytes().to_vec();
        records.push(("optim.step".into(), TensorData::U8 { shape: vec![8], data: step }));
        let (m, v) = opt.moments();
        for (i, (name, t)) in model.params.iter().enumerate() {
            records.push((format!("optim.m/{name}"), TensorData::F32(Tensor::new(t.shape(), m[i].clone())?)));
            records.push((format!("optim.v/{name}"), TensorData::F32(Tensor::new(t.shape(), v[i].clone())?)));
        }
    }
    save_archive(path, &records)
}

struct Records {
    path: String,
    items: Vec<(String, TensorData)>,
}

impl Records {
    fn get(&self, name: &str) -> Option<&TensorData> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(TensorData::U8 { data, .. }) => Ok(data),
            Some(_) => Err(Error::format(&self.path, format!("record `{name}` should be u8"))),
            None => Err(Error::format(&self.path, format!("missing record `{name}`"))),
        }
    }

    fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.bytes(name)?)
            .map_err(|e| Error::format(&self.path, format!("record `{name}`: {e}")))
    }

    fn f32(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(TensorData::F32(t)) => Ok(t),
            Some(_) => Err(Error::format(&self.path, format!("record `{name}` should be f32"))),
            None => Err(Error::format(&self.path, format!("missing record `{name}`"))),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let rec = Records { path: path.display().to_string(), items: load_archive(path)? };
    let model: UNetConfig = rec.json("model.config")?;
    let meta = rec.json("meta")?;
    let mut params = ParamStore::new();
    let mut names = Vec::new();
    for (name, t) in &rec.items {
        if let Some(p) = name.strip_prefix("param/") {
            match t {
                TensorData::F32(t) => params.push(p, t.clone()),
                _ => return Err(Error::format(&rec.path, format!("record `{name}` should be f32"))),
            };
            names.push(p.to_string());
        }
    }
    let optimizer = match rec.get("optim.config") {
        None => None,
        Some(_) => {
            let b = rec.bytes("optim.step")?;
            let step = u64::from_le_bytes(
                b.try_into()
                    .map_err(|_| Error::format(&rec.path, "record `optim.step` must hold 8 bytes"))?,
            );
            let moments = |prefix: &str| -> Result<Vec<Vec<f32>>> {
                names.iter().map(|n| Ok(rec.f32(&format!("{prefix}/{n}"))?.data().to_vec())).collect()
            };
            Some(OptimizerState {
                config: rec.json("optim.config")?,
                step,
                first: moments("optim.m")?,
                second: moments("optim.v")?,
            })
        }
    };
    Ok(Checkpoint { model, params, optimizer, meta })
}

impl Checkpoint {
    /// Copy weights into `model`; names and shapes must agree.
    pub fn load_into(&self, model: &mut UNetModel) -> Result<()> {
        model.params.load_from(&self.params)
    }

    /// A fresh model of the saved configuration carrying the saved weights.
    pub fn build_model(&self) -> Result<UNetModel> {
        let mut m = UNetModel::init(self.model.clone(), 0)?;
        self.load_into(&mut m)?;
        Ok(m)
    }
}
