use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Normalization};

/// Live augmentation: random crop from a reflect-padded frame, optional
/// horizontal flip, then per-channel normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop_padding: usize,
    pub horizontal_flip: bool,
    pub normalize: Normalization,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(
        crop_padding: usize,
        horizontal_flip: bool,
        normalize: Normalization,
        seed: u64,
    ) -> Result<Self> {
        normalize.validate()?;
        Ok(Self {
            crop_padding,
            horizontal_flip,
            normalize,
            seed,
        })
    }

    /// No crop, no flip, no normalization.
    pub fn identity(channels: usize) -> Self {
        Self {
            crop_padding: 0,
            horizontal_flip: false,
            normalize: Normalization::identity(channels),
            seed: 0,
        }
    }

    /// Padding 4 with flips, the usual CIFAR recipe.
    pub fn cifar(normalize: Normalization, seed: u64) -> Self {
        Self {
            crop_padding: 4,
            horizontal_flip: true,
            normalize,
            seed,
        }
    }

    /// Same normalization, no random geometry (evaluation path).
    pub fn eval_only(&self) -> Self {
        Self {
            crop_padding: 0,
            horizontal_flip: false,
            ..self.clone()
        }
    }

    /// Draws one set of random decisions: row offset, column offset, flip.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let span = 2 * self.crop_padding;
        let dy = if span > 0 { rng.gen_range(0..=span) } else { 0 };
        let dx = if span > 0 { rng.gen_range(0..=span) } else { 0 };
        let flip = self.horizontal_flip && rng.gen_bool(0.5);
        AugmentDraw { dy, dx, flip }
    }
}

/// The random decisions behind one augmentation. Offsets index into the
/// padded frame, so `(p, p)` is the centered (unshifted) crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

impl AugmentDraw {
    pub fn apply(&self, img: &ImageTensor, spec: &AugmentSpec) -> Result<ImageTensor> {
        let [c, h, w] = img.shape();
        let p = spec.crop_padding;
        if p > 0 && (p >= h || p >= w) {
            return Err(Error::Invalid(format!(
                "crop padding {p} too large for a {h}x{w} image"
            )));
        }
        if spec.normalize.mean.len() != c {
            return Err(Error::shape(
                format!("{c} normalization channels"),
                spec.normalize.mean.len(),
            ));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let (m, s) = (spec.normalize.mean[ch], spec.normalize.std[ch]);
            for y in 0..h {
                let sy = reflect(y as isize + self.dy as isize - p as isize, h);
                for x in 0..w {
                    let xx = if self.flip { w - 1 - x } else { x };
                    let sx = reflect(xx as isize + self.dx as isize - p as isize, w);
                    out.push((img.get(ch, sy, sx) - m) / s);
                }
            }
        }
        let range = spec.normalize.map_range(img.range());
        ImageTensor::clamped(c, h, w, out, range)
    }
}

/// Draws from `rng` and applies the result.
pub fn augment<R: Rng + ?Sized>(
    img: &ImageTensor,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<ImageTensor> {
    spec.draw(rng).apply(img, spec)
}
