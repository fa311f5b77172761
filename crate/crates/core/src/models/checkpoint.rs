//! Versioned safetensors checkpoints holding any number of named models plus
//! free-form string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use super::{ModelHandle, NetworkSpec};
use crate::error::{Error, Result};
use crate::image::Normalization;

pub const CHECKPOINT_FORMAT: &str = "ganprotect-ckpt";
pub const CHECKPOINT_VERSION: &str = "1";
const HEADER_KEY: &str = "ganprotect";

/// SHA-256 of the JSON encoding of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Well-known metadata entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Completed epochs at save time.
    pub epoch: usize,
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let t = t.contiguous();
    match t.kind() {
        Kind::Double => {
            let v: Vec<f64> = Vec::try_from(t.flatten(0, -1)).unwrap_or_default();
            v.iter().flat_map(|x| x.to_le_bytes()).collect()
        }
        Kind::Int64 => {
            let v: Vec<i64> = Vec::try_from(t.flatten(0, -1)).unwrap_or_default();
            v.iter().flat_map(|x| x.to_le_bytes()).collect()
        }
        _ => {
            let v: Vec<f32> =
                Vec::try_from(t.to_kind(Kind::Float).flatten(0, -1)).unwrap_or_default();
            v.iter().flat_map(|x| x.to_le_bytes()).collect()
        }
    }
}

fn dtype_of(t: &Tensor) -> Dtype {
    match t.kind() {
        Kind::Double => Dtype::F64,
        Kind::Int64 => Dtype::I64,
        _ => Dtype::F32,
    }
}

pub(crate) fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape: Vec<i64> = view.shape().iter().map(|d| *d as i64).collect();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::from_slice(&v)
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::from_slice(&v)
        }
        Dtype::I64 => {
            let v: Vec<i64> = data
                .chunks_exact(8)
                .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::from_slice(&v)
        }
        other => {
            return Err(Error::Checkpoint(format!("unsupported dtype {other:?}")));
        }
    };
    Ok(t.view(shape.as_slice()))
}

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: &CheckpointMeta) -> Self {
        let mut c = Checkpoint::default();
        c.meta.insert("config_hash".into(), meta.config_hash.clone());
        c.meta.insert("epoch".into(), meta.epoch.to_string());
        c
    }

    pub fn header(&self) -> Result<CheckpointMeta> {
        let config_hash = self
            .meta
            .get("config_hash")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing config_hash".into()))?;
        let epoch = self
            .meta
            .get("epoch")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing or bad epoch".into()))?;
        Ok(CheckpointMeta { config_hash, epoch })
    }

    /// Logs a warning when the stored configuration hash differs.
    pub fn check_config(&self, expected: &str) -> Result<bool> {
        let found = self.header()?.config_hash;
        if found != expected {
            log::warn!("checkpoint was written with a different configuration ({found} != {expected})");
            return Ok(false);
        }
        Ok(true)
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors
            .insert(name.into(), t.detach().copy());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Stores every variable of `model` under `prefix.`, plus its spec and
    /// input normalization as metadata.
    pub fn insert_model(&mut self, prefix: &str, model: &ModelHandle) -> Result<()> {
        self.meta.insert(
            format!("{prefix}.spec"),
            serde_json::to_string(model.spec())?,
        );
        self.meta.insert(
            format!("{prefix}.input_norm"),
            serde_json::to_string(model.input_norm())?,
        );
        for (name, t) in model.variables() {
            self.insert_tensor(format!("{prefix}.{name}"), &t);
        }
        Ok(())
    }

    pub fn model_spec(&self, prefix: &str) -> Result<NetworkSpec> {
        let s = self
            .meta
            .get(&format!("{prefix}.spec"))
            .ok_or_else(|| Error::Checkpoint(format!("no model `{prefix}` in checkpoint")))?;
        Ok(serde_json::from_str(s)?)
    }

    /// Overwrites `model`'s variables from `prefix.` entries.
    pub fn restore_model(&self, prefix: &str, model: &mut ModelHandle) -> Result<()> {
        let stored = self.model_spec(prefix)?;
        if stored.arch != model.spec().arch || stored.base_width != model.spec().base_width {
            return Err(Error::Checkpoint(format!(
                "model `{prefix}` was saved as {} (width {}), not {} (width {})",
                stored.arch,
                stored.base_width,
                model.spec().arch,
                model.spec().base_width
            )));
        }
        let p = format!("{prefix}.");
        let tensors: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.shallow_clone())))
            .collect();
        model.load_variables(&tensors)?;
        if let Some(n) = self.meta.get(&format!("{prefix}.input_norm")) {
            let n: Normalization = serde_json::from_str(n)?;
            model.set_input_norm(n)?;
        }
        Ok(())
    }

    /// Builds a fresh model from the stored spec and restores it.
    pub fn load_model(&self, prefix: &str) -> Result<ModelHandle> {
        let mut spec = self.model_spec(prefix)?;
        if spec.weights.is_some() {
            spec.weights = Some(super::Weights::Seeded);
        }
        let mut m = ModelHandle::build(&spec)?;
        self.restore_model(prefix, &mut m)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>, Dtype)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    tensor_bytes(t),
                    t.size().iter().map(|d| *d as usize).collect(),
                    dtype_of(t),
                )
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s, d)| {
                TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        // A single header entry keeps the file bytes independent of hash order.
        let mut meta = self.meta.clone();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.into());
        let packed = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(HEADER_KEY.to_string(), packed)]);
        let out = safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: String| Error::Checkpoint(format!("{}: {why}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut meta: BTreeMap<String, String> = match header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
        {
            Some(packed) => serde_json::from_str(packed).map_err(|e| bad(e.to_string()))?,
            None => BTreeMap::new(),
        };
        match meta.remove("format").as_deref() {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(bad(format!("not a checkpoint (format {other:?})"))),
        }
        match meta.remove("version").as_deref() {
            Some(CHECKPOINT_VERSION) => {}
            other => return Err(bad(format!("unsupported checkpoint version {other:?}"))),
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, tensor_from_view(&view)?);
        }
        Ok(Self { meta, tensors })
    }
}
