//! CIFAR-10 and CIFAR-100 binary batches.
//!
//! CIFAR-10 records are `1 label byte + 3072 pixel bytes`; CIFAR-100 records
//! carry a coarse and a fine label byte before the pixels. Pixels are the R,
//! G and B planes of a 32×32 image, each row-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

pub const CIFAR_SIDE: usize = 32;
const PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_RECORD: usize = 1 + PIXELS;
pub const CIFAR100_RECORD: usize = 2 + PIXELS;

fn cifar10_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

fn cifar100_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => vec!["train.bin".to_string()],
        Split::Test => vec!["test.bin".to_string()],
    }
}

/// Accepts either the directory holding the batch files or its parent as
/// shipped in the official archive.
fn resolve(dir: &Path, nested: &str) -> PathBuf {
    let inner = dir.join(nested);
    if inner.is_dir() {
        inner
    } else {
        dir.to_path_buf()
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode_pixels(bytes: &[u8]) -> Result<ImageTensor> {
    let data = bytes.iter().map(|b| *b as f32 / 255.0).collect();
    ImageTensor::new(3, CIFAR_SIDE, CIFAR_SIDE, data, ValueRange::UNIT)
}

fn load_records(
    dir: &Path,
    files: &[String],
    record: usize,
    label_offset: usize,
    num_classes: usize,
    name: String,
) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    for file in files {
        let path = dir.join(file);
        let bytes = read_file(&path)?;
        if bytes.len() % record != 0 {
            return Err(Error::Truncated {
                path,
                offset: (bytes.len() / record * record) as u64,
            });
        }
        for (i, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[label_offset] as usize;
            if label >= num_classes {
                return Err(Error::Invalid(format!(
                    "{}: record {i} has label {label} (>= {num_classes})",
                    path.display()
                )));
            }
            let pixels = &rec[record - PIXELS..];
            items.push((decode_pixels(pixels)?, label));
        }
    }
    LabeledDataset::new(name, num_classes, items)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let dir = resolve(dir, "cifar-10-batches-bin");
    let name = format!("cifar10-{}", split_name(split));
    load_records(&dir, &cifar10_files(split), CIFAR10_RECORD, 0, 10, name)
}

/// Loads CIFAR-100 using the fine (100-way) label.
pub fn load_cifar100(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let dir = resolve(dir, "cifar-100-binary");
    let name = format!("cifar100-{}", split_name(split));
    load_records(&dir, &cifar100_files(split), CIFAR100_RECORD, 1, 100, name)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn quantize(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::shape("[3, 32, 32]", format!("{:?}", img.shape())));
    }
    let unit = img.remap(ValueRange::UNIT);
    Ok(unit
        .as_slice()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect())
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `d` in the CIFAR-10 binary layout (train splits are spread over
/// the five batch files).
pub fn write_cifar10(dir: &Path, split: Split, d: &LabeledDataset) -> Result<()> {
    if d.num_classes() > 10 {
        return Err(Error::Invalid("CIFAR-10 layout holds at most 10 classes".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = cifar10_files(split);
    let per_file = d.len().div_ceil(files.len()).max(1);
    let mut chunks = d.items().chunks(per_file);
    for file in &files {
        let mut bytes = Vec::new();
        for (img, label) in chunks.next().unwrap_or(&[]) {
            bytes.push(*label as u8);
            bytes.extend(quantize(img)?);
        }
        write_all(&dir.join(file), &bytes)?;
    }
    Ok(())
}

/// Writes `d` in the CIFAR-100 layout; the coarse label is `fine / 5`.
pub fn write_cifar100(dir: &Path, split: Split, d: &LabeledDataset) -> Result<()> {
    if d.num_classes() > 100 {
        return Err(Error::Invalid("CIFAR-100 layout holds at most 100 classes".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(d.len() * CIFAR100_RECORD);
    for (img, label) in d.items() {
        bytes.push((*label / 5) as u8);
        bytes.push(*label as u8);
        bytes.extend(quantize(img)?);
    }
    write_all(&dir.join(&cifar100_files(split)[0]), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, seed: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(|i| (i as u8).wrapping_mul(seed)));
        r
    }

    #[test]
    fn empty_directory_names_the_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("test_batch.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(1, 3);
        bytes.extend(record(2, 5));
        bytes.truncate(CIFAR10_RECORD + 100);
        fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, CIFAR10_RECORD as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cifar100_length_must_divide_record() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test.bin"), vec![0u8; CIFAR100_RECORD * 2 + 1]).unwrap();
        assert!(matches!(
            load_cifar100(dir.path(), Split::Test),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn decodes_planes_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(7, 1);
        fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let d = load_cifar10(dir.path(), Split::Test).unwrap();
        let (img, label) = &d.items()[0];
        assert_eq!(*label, 7);
        // Byte 1 + (c*1024 + y*32 + x) holds channel c at row y, column x.
        for &(c, y, x) in &[(0, 0, 1), (1, 3, 5), (2, 31, 30)] {
            let b = rec[1 + c * 1024 + y * 32 + x];
            assert_eq!(img.get(c, y, x), b as f32 / 255.0);
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = decode_pixels(&record(0, 9)[1..]).unwrap();
        let d = LabeledDataset::new("w", 100, vec![(img.clone(), 42), (img, 99)]).unwrap();
        write_cifar100(dir.path(), Split::Train, &d).unwrap();
        let back = load_cifar100(dir.path(), Split::Train).unwrap();
        assert_eq!(back.items(), d.items());
        assert_eq!(back.num_classes(), 100);
    }
}
