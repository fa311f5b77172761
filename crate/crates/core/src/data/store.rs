//! Directory format for derived datasets (protected or transformed images).
//!
//! `manifest.json` describes the contents; `images.f32` holds every image as
//! little-endian `f32` in `C×H×W` order, back to back; `labels.u32` holds one
//! little-endian `u32` label per image. Values are stored exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

pub const STORE_FORMAT: &str = "ganprotect-images/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub name: String,
    pub num_classes: usize,
    pub count: usize,
    pub shape: [usize; 3],
    pub range: ValueRange,
    /// Free-form provenance (e.g. perturbation parameters, model hash).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_dataset_dir(
    dir: &Path,
    d: &LabeledDataset,
    meta: serde_json::Value,
) -> Result<StoreManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = d.image_shape().unwrap_or([0, 0, 0]);
    let manifest = StoreManifest {
        format: STORE_FORMAT.into(),
        name: d.name().into(),
        num_classes: d.num_classes(),
        count: d.len(),
        shape,
        range: d.value_range().unwrap_or(ValueRange::UNIT),
        meta,
    };
    let mut images = Vec::with_capacity(d.len() * shape.iter().product::<usize>() * 4);
    let mut labels = Vec::with_capacity(d.len() * 4);
    for (img, label) in d.items() {
        for v in img.as_slice() {
            images.extend_from_slice(&v.to_le_bytes());
        }
        labels.extend_from_slice(&(*label as u32).to_le_bytes());
    }
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("images.f32", &images)?;
    write("labels.u32", &labels)?;
    write("manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset_dir(dir: &Path) -> Result<(LabeledDataset, StoreManifest)> {
    let read = |name: &str| {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest: StoreManifest = serde_json::from_slice(&read("manifest.json")?)?;
    if manifest.format != STORE_FORMAT {
        return Err(Error::Invalid(format!(
            "{}: unsupported image store format `{}`",
            dir.display(),
            manifest.format
        )));
    }
    let images = read("images.f32")?;
    let labels = read("labels.u32")?;
    let [c, h, w] = manifest.shape;
    let per = c * h * w * 4;
    if images.len() != per * manifest.count {
        return Err(Error::Truncated {
            path: dir.join("images.f32"),
            offset: images.len().min(per * manifest.count) as u64,
        });
    }
    if labels.len() != 4 * manifest.count {
        return Err(Error::Truncated {
            path: dir.join("labels.u32"),
            offset: labels.len().min(4 * manifest.count) as u64,
        });
    }
    let mut items = Vec::with_capacity(manifest.count);
    for (img, label) in images.chunks_exact(per.max(1)).zip(labels.chunks_exact(4)) {
        let data = img
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let label = u32::from_le_bytes(label.try_into().unwrap()) as usize;
        items.push((ImageTensor::new(c, h, w, data, manifest.range)?, label));
    }
    let d = LabeledDataset::new(manifest.name.clone(), manifest.num_classes, items)?;
    Ok((d, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(
            3,
            1,
            2,
            vec![-1.0, -0.333, 0.1, 0.7, 1.0, 0.0],
            ValueRange::SIGNED,
        )
        .unwrap();
        let d = LabeledDataset::new("p", 4, vec![(img.clone(), 3), (img, 1)]).unwrap();
        let m = save_dataset_dir(dir.path(), &d, serde_json::json!({"eps": 0.3})).unwrap();
        let (back, m2) = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(m, m2);
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset_dir(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }
}
