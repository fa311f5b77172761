use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::models::ModelHandle;
use crate::rng::SeedStream;
use crate::transform::transform;

/// How a scheme's key relates to the images it encrypts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    /// No key: anyone can compute the mapping.
    None,
    /// One key shared by every image.
    Common,
    /// A fresh key per image.
    PerImage,
}

/// A visual encryption (or protection) scheme. `key_id` selects the
/// per-image key; common-key and keyless schemes ignore it.
pub trait EncryptionScheme {
    fn name(&self) -> &str;
    fn key_mode(&self) -> KeyMode;
    fn encrypt(&self, img: &ImageTensor, key_id: u64) -> Result<ImageTensor>;

    fn keyed(&self) -> bool {
        self.key_mode() != KeyMode::None
    }
}

/// Encrypts every image. Key ids are derived from the dataset name and the
/// item position, so distinct datasets never share per-image keys.
pub fn encrypt_dataset(scheme: &dyn EncryptionScheme, d: &LabeledDataset) -> Result<LabeledDataset> {
    let ids = SeedStream::new(0).child(d.name());
    d.map_images(format!("{}@{}", d.name(), scheme.name()), |i, img| {
        scheme.encrypt(img, ids.derive("key", i as u64))
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityScheme;

impl EncryptionScheme for IdentityScheme {
    fn name(&self) -> &str {
        "identity"
    }

    fn key_mode(&self) -> KeyMode {
        KeyMode::None
    }

    fn encrypt(&self, img: &ImageTensor, _key_id: u64) -> Result<ImageTensor> {
        Ok(img.clone())
    }
}

/// Block scrambling with one secret permutation of `block×block` tiles.
#[derive(Debug, Clone, Copy)]
pub struct BlockShuffle {
    pub block: usize,
    pub seed: u64,
}

impl BlockShuffle {
    pub fn new(block: usize, seed: u64) -> Self {
        Self { block, seed }
    }

    /// Source tile of each destination tile.
    pub fn permutation(&self, tiles: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..tiles).collect();
        p.shuffle(&mut SeedStream::new(self.seed).rng("block_shuffle", tiles as u64));
        p
    }
}

impl EncryptionScheme for BlockShuffle {
    fn name(&self) -> &str {
        "block_shuffle"
    }

    fn key_mode(&self) -> KeyMode {
        KeyMode::Common
    }

    fn encrypt(&self, img: &ImageTensor, _key_id: u64) -> Result<ImageTensor> {
        let [c, h, w] = img.shape();
        let b = self.block;
        if b == 0 || h % b != 0 || w % b != 0 {
            return Err(Error::Invalid(format!(
                "{h}x{w} image is not divisible into {b}x{b} blocks"
            )));
        }
        let (th, tw) = (h / b, w / b);
        let perm = self.permutation(th * tw);
        let src = img.as_slice();
        let mut out = vec![0f32; src.len()];
        for (dst_tile, src_tile) in perm.iter().enumerate() {
            let (dy, dx) = (dst_tile / tw * b, dst_tile % tw * b);
            let (sy, sx) = (src_tile / tw * b, src_tile % tw * b);
            for ch in 0..c {
                for r in 0..b {
                    let d0 = (ch * h + dy + r) * w + dx;
                    let s0 = (ch * h + sy + r) * w + sx;
                    out[d0..d0 + b].copy_from_slice(&src[s0..s0 + b]);
                }
            }
        }
        ImageTensor::new(c, h, w, out, img.range())
    }
}

/// Negative/positive transformation: each value is inverted within the
/// image range with probability 1/2, under a per-image key.
#[derive(Debug, Clone, Copy)]
pub struct NegPosFlip {
    pub seed: u64,
}

impl EncryptionScheme for NegPosFlip {
    fn name(&self) -> &str {
        "negpos_flip"
    }

    fn key_mode(&self) -> KeyMode {
        KeyMode::PerImage
    }

    fn encrypt(&self, img: &ImageTensor, key_id: u64) -> Result<ImageTensor> {
        let mut rng = SeedStream::new(self.seed).rng("negpos", key_id);
        let r = img.range();
        let data = img
            .as_slice()
            .iter()
            .map(|v| if rng.gen_bool(0.5) { r.lo + r.hi - v } else { *v })
            .collect();
        let [c, h, w] = img.shape();
        ImageTensor::clamped(c, h, w, data, r)
    }
}

/// A trained transformation network used as a (keyless) scheme.
#[derive(Debug)]
pub struct TransformScheme {
    pub g: ModelHandle,
    pub label: String,
}

impl EncryptionScheme for TransformScheme {
    fn name(&self) -> &str {
        &self.label
    }

    fn key_mode(&self) -> KeyMode {
        KeyMode::None
    }

    fn encrypt(&self, img: &ImageTensor, _key_id: u64) -> Result<ImageTensor> {
        transform(&self.g, &img.remap(ValueRange::UNIT))
    }
}

/// Builds one of the reference schemes by name.
pub fn scheme_by_name(name: &str, seed: u64) -> Result<Box<dyn EncryptionScheme>> {
    match name {
        "identity" => Ok(Box::new(IdentityScheme)),
        "block_shuffle" => Ok(Box::new(BlockShuffle::new(4, seed))),
        "negpos_flip" => Ok(Box::new(NegPosFlip { seed })),
        other => Err(Error::Invalid(format!(
            "unknown scheme `{other}` (identity|block_shuffle|negpos_flip|<checkpoint>)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ImageTensor {
        let data = (0..3 * 8 * 8).map(|i| i as f32 / 191.0).collect();
        ImageTensor::new(3, 8, 8, data, ValueRange::UNIT).unwrap()
    }

    #[test]
    fn block_shuffle_moves_whole_tiles() {
        let s = BlockShuffle::new(4, 1);
        let img = ramp();
        let e = s.encrypt(&img, 0).unwrap();
        assert_eq!(e, s.encrypt(&img, 99).unwrap());
        let perm = s.permutation(4);
        for (dst, src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / 2 * 4, dst % 2 * 4);
            let (sy, sx) = (src / 2 * 4, src % 2 * 4);
            for c in 0..3 {
                for r in 0..4 {
                    for k in 0..4 {
                        assert_eq!(e.get(c, dy + r, dx + k), img.get(c, sy + r, sx + k));
                    }
                }
            }
        }
        let mut sorted: Vec<f32> = e.as_slice().to_vec();
        sorted.sort_by(f32::total_cmp);
        let mut orig = img.as_slice().to_vec();
        orig.sort_by(f32::total_cmp);
        assert_eq!(sorted, orig);
        let odd = ImageTensor::filled(3, 6, 6, 0.5).unwrap();
        assert!(s.encrypt(&odd, 0).is_err());
    }

    #[test]
    fn negpos_is_an_involution_per_key() {
        let s = NegPosFlip { seed: 2 };
        let img = ramp();
        let e = s.encrypt(&img, 5).unwrap();
        assert_ne!(e, img);
        let back = s.encrypt(&e, 5).unwrap();
        assert!(back.linf_distance(&img).unwrap() < 1e-6);
        assert_ne!(e, s.encrypt(&img, 6).unwrap());
        assert_eq!(s.key_mode(), KeyMode::PerImage);
    }

    #[test]
    fn dataset_encryption_keeps_labels() {
        let d = crate::data::synth::synthetic_dataset(&crate::data::synth::SyntheticSpec::new(2, 4, 8, 0)).unwrap();
        let e = encrypt_dataset(&IdentityScheme, &d).unwrap();
        assert_eq!(e.labels(), d.labels());
        assert!(scheme_by_name("rot13", 0).is_err());
    }
}
