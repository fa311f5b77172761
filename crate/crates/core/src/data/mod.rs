//! Dataset ingestion, splitting, augmentation, and on-disk storage.

mod augment;
mod cifar;
mod stl10;
mod store;
pub mod synth;

pub use augment::{augment, AugmentDraw, AugmentSpec};
pub use cifar::{
    load_cifar10, load_cifar100, write_cifar10, write_cifar100, CIFAR100_RECORD, CIFAR10_RECORD,
};
pub use stl10::{load_stl10, write_stl10, STL10_IMAGE_BYTES, STL10_SIDE};
pub use store::{load_dataset_dir, save_dataset_dir, StoreManifest};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Normalization, ValueRange};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Ordered `(image, label)` pairs sharing one shape and value range.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    num_classes: usize,
    items: Vec<(ImageTensor, usize)>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        items: Vec<(ImageTensor, usize)>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Invalid("num_classes must be positive".into()));
        }
        if let Some((first, _)) = items.first() {
            for (img, label) in &items {
                if *label >= num_classes {
                    return Err(Error::Label {
                        label: *label as i64,
                        num_classes,
                    });
                }
                first.same_shape(img)?;
                if img.range() != first.range() {
                    return Err(Error::Invalid("dataset images disagree on value range".into()));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            items,
        })
    }

    pub fn empty(name: impl Into<String>, num_classes: usize) -> Result<Self> {
        Self::new(name, num_classes, Vec::new())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(ImageTensor, usize)] {
        &self.items
    }

    pub fn get(&self, i: usize) -> Option<&(ImageTensor, usize)> {
        self.items.get(i)
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageTensor> {
        self.items.iter().map(|(img, _)| img)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    /// `[C, H, W]` of the items, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.items.first().map(|(img, _)| img.shape())
    }

    pub fn value_range(&self) -> Option<ValueRange> {
        self.items.first().map(|(img, _)| img.range())
    }

    pub fn into_items(self) -> Vec<(ImageTensor, usize)> {
        self.items
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Items at the given indices, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<LabeledDataset> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("index {i} out of bounds")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(name, self.num_classes, items)
    }

    /// Keeps only the listed classes, relabelled `0..classes.len()` in the
    /// given order, and at most `limit` items.
    pub fn select_classes(&self, classes: &[usize], limit: Option<usize>) -> Result<LabeledDataset> {
        let mut items = Vec::new();
        for (img, label) in &self.items {
            if let Some(pos) = classes.iter().position(|c| c == label) {
                items.push((img.clone(), pos));
                if limit.is_some_and(|l| items.len() >= l) {
                    break;
                }
            }
        }
        LabeledDataset::new(
            format!("{}[classes={classes:?}]", self.name),
            classes.len(),
            items,
        )
    }

    /// Averages non-overlapping `factor×factor` blocks of every image.
    pub fn downscale(&self, factor: usize) -> Result<LabeledDataset> {
        if factor == 0 {
            return Err(Error::Invalid("downscale factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let name = format!("{}/{factor}", self.name);
        self.map_images(name, |_, img| {
            let [c, h, w] = img.shape();
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::Invalid(format!(
                    "{h}x{w} image is not divisible by downscale factor {factor}"
                )));
            }
            let (oh, ow) = (h / factor, w / factor);
            let src = img.as_slice();
            let norm = (factor * factor) as f32;
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0f32;
                        for dy in 0..factor {
                            let row = (ch * h + y * factor + dy) * w + x * factor;
                            acc += src[row..row + factor].iter().sum::<f32>();
                        }
                        out.push(acc / norm);
                    }
                }
            }
            ImageTensor::clamped(c, oh, ow, out, img.range())
        })
    }

    /// Replaces every image via `f`, keeping labels and order.
    pub fn map_images<F>(&self, name: impl Into<String>, mut f: F) -> Result<LabeledDataset>
    where
        F: FnMut(usize, &ImageTensor) -> Result<ImageTensor>,
    {
        let items = self
            .items
            .iter()
            .enumerate()
            .map(|(i, (img, l))| Ok((f(i, img)?, *l)))
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(name, self.num_classes, items)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, l) in &self.items {
            counts[*l] += 1;
        }
        counts
    }
}

/// Deterministically partitions `d` into two halves. The first half gets
/// `⌊n/2⌋` items, the second the rest; each half keeps the original order.
pub fn split_halves(d: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if d.is_empty() {
        return Err(Error::Empty("dataset to split"));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut SeedStream::new(seed).rng("split_halves", 0));
    let half = d.len() / 2;
    let mut first = idx[..half].to_vec();
    let mut second = idx[half..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        d.subset(&first, format!("{}/half-1", d.name()))?,
        d.subset(&second, format!("{}/half-2", d.name()))?,
    ))
}

/// Per-channel mean and (population) standard deviation over a dataset.
pub fn channel_stats(d: &LabeledDataset) -> Result<Normalization> {
    let [c, h, w] = d.image_shape().ok_or(Error::Empty("dataset for statistics"))?;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for img in d.images() {
        for (ch, plane) in img.as_slice().chunks(h * w).enumerate() {
            for v in plane {
                let v = *v as f64;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (d.len() * h * w) as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / n;
            ((q / n - m * m).max(0.0).sqrt() as f32).max(1e-6)
        })
        .collect();
    Ok(Normalization { mean, std })
}
