//! STL-10 binary files: `{split}_X.bin` holds 96×96×3 images stored
//! channel-plane by channel-plane, each plane column-major; `{split}_y.bin`
//! holds one label byte per image in `1..=10`.

use std::fs;
use std::path::{Path, PathBuf};

use super::cifar::read_file;
use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

pub const STL10_SIDE: usize = 96;
pub const STL10_IMAGE_BYTES: usize = 3 * STL10_SIDE * STL10_SIDE;

fn files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let dir = {
        let inner = dir.join("stl10_binary");
        if inner.is_dir() {
            inner
        } else {
            dir.to_path_buf()
        }
    };
    let stem = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    (
        dir.join(format!("{stem}_X.bin")),
        dir.join(format!("{stem}_y.bin")),
    )
}

fn decode(bytes: &[u8]) -> Result<ImageTensor> {
    let plane = STL10_SIDE * STL10_SIDE;
    let mut data = vec![0f32; STL10_IMAGE_BYTES];
    for c in 0..3 {
        for y in 0..STL10_SIDE {
            for x in 0..STL10_SIDE {
                // Source is column-major: column x is contiguous.
                let src = c * plane + x * STL10_SIDE + y;
                data[c * plane + y * STL10_SIDE + x] = bytes[src] as f32 / 255.0;
            }
        }
    }
    ImageTensor::new(3, STL10_SIDE, STL10_SIDE, data, ValueRange::UNIT)
}

pub fn load_stl10(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (xpath, ypath) = files(dir, split);
    let images = read_file(&xpath)?;
    let labels = read_file(&ypath)?;
    if images.len() % STL10_IMAGE_BYTES != 0 {
        return Err(Error::Truncated {
            path: xpath,
            offset: (images.len() / STL10_IMAGE_BYTES * STL10_IMAGE_BYTES) as u64,
        });
    }
    let n = images.len() / STL10_IMAGE_BYTES;
    if labels.len() != n {
        return Err(Error::Truncated {
            path: ypath,
            offset: labels.len().min(n) as u64,
        });
    }
    let mut items = Vec::with_capacity(n);
    for (i, (img, label)) in images
        .chunks_exact(STL10_IMAGE_BYTES)
        .zip(&labels)
        .enumerate()
    {
        if !(1..=10).contains(label) {
            return Err(Error::Invalid(format!(
                "{}: label {label} of image {i} not in 1..=10",
                ypath.display()
            )));
        }
        items.push((decode(img)?, (*label - 1) as usize));
    }
    let name = match split {
        Split::Train => "stl10-train",
        Split::Test => "stl10-test",
    };
    LabeledDataset::new(name, 10, items)
}

/// Writes `d` (3×96×96 images, at most 10 classes) in the STL-10 layout.
pub fn write_stl10(dir: &Path, split: Split, d: &LabeledDataset) -> Result<()> {
    if d.num_classes() > 10 {
        return Err(Error::Invalid("STL-10 layout holds at most 10 classes".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (xpath, ypath) = files(dir, split);
    let plane = STL10_SIDE * STL10_SIDE;
    let mut xs = Vec::with_capacity(d.len() * STL10_IMAGE_BYTES);
    let mut ys = Vec::with_capacity(d.len());
    for (img, label) in d.items() {
        if img.shape() != [3, STL10_SIDE, STL10_SIDE] {
            return Err(Error::shape("[3, 96, 96]", format!("{:?}", img.shape())));
        }
        let unit = img.remap(ValueRange::UNIT);
        let mut buf = vec![0u8; STL10_IMAGE_BYTES];
        for c in 0..3 {
            for y in 0..STL10_SIDE {
                for x in 0..STL10_SIDE {
                    buf[c * plane + x * STL10_SIDE + y] =
                        (unit.get(c, y, x) * 255.0).round() as u8;
                }
            }
        }
        xs.extend(buf);
        ys.push(*label as u8 + 1);
    }
    fs::write(&xpath, xs).map_err(|e| Error::io(&xpath, e))?;
    fs::write(&ypath, ys).map_err(|e| Error::io(&ypath, e))?;
    Ok(())
}
