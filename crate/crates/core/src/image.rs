//! The image type shared by every stage, plus conversions to and from
//! batched `tch` tensors.

use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

/// Closed interval that every value of an image is guaranteed to lie in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    /// Pixel space: what the loaders produce.
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    /// Generator space: tanh-bounded network outputs.
    pub const SIGNED: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Invalid(format!("bad value range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Per-channel affine normalization `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Maps `[0,1]` pixels onto `[-1,1]`.
    pub fn signed_unit(channels: usize) -> Self {
        Self {
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }

    /// Constants the ImageNet-trained VGG weights expect.
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::Invalid(
                "normalization mean/std must be non-empty and equally long".into(),
            ));
        }
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid("normalization std must be > 0".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|m| *m == 0.0) && self.std.iter().all(|s| *s == 1.0)
    }

    /// Range of normalized values given input range `r` (union over channels).
    pub fn map_range(&self, r: ValueRange) -> ValueRange {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for (m, s) in self.mean.iter().zip(&self.std) {
            lo = lo.min((r.lo - m) / s);
            hi = hi.max((r.hi - m) / s);
        }
        ValueRange { lo, hi }
    }

    fn broadcast(&self, v: &[f32], like: &Tensor) -> Tensor {
        Tensor::from_slice(v)
            .to_kind(like.kind())
            .to_device(like.device())
            .view([1, v.len() as i64, 1, 1])
    }

    /// Applies the normalization to an `N×C×H×W` tensor (differentiable).
    pub fn apply(&self, xs: &Tensor) -> Tensor {
        if self.is_identity() {
            return xs.shallow_clone();
        }
        (xs - self.broadcast(&self.mean, xs)) / self.broadcast(&self.std, xs)
    }

    pub fn invert(&self, xs: &Tensor) -> Tensor {
        if self.is_identity() {
            return xs.shallow_clone();
        }
        xs * self.broadcast(&self.std, xs) + self.broadcast(&self.mean, xs)
    }
}

/// A `C×H×W` real-valued image, row-major within each channel plane, whose
/// values all lie in `range`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{channels}x{height}x{width} = {} values", channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::Invalid(format!(
                "value {v} outside declared range [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    /// Like [`ImageTensor::new`] but clamps stray values (NaN becomes `lo`).
    pub fn clamped(
        channels: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() {
                range.lo
            } else {
                v.clamp(range.lo, range.hi)
            };
        }
        Self::new(channels, height, width, data, range)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
            ValueRange::UNIT,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Linearly remaps the image from its range onto `target`.
    pub fn remap(&self, target: ValueRange) -> ImageTensor {
        if self.range == target {
            return self.clone();
        }
        let scale = target.width() / self.range.width();
        let data = self
            .data
            .iter()
            .map(|v| ((v - self.range.lo) * scale + target.lo).clamp(target.lo, target.hi))
            .collect();
        ImageTensor {
            data,
            range: target,
            ..*self
        }
    }

    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f32> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor(&self, kind: Kind) -> Tensor {
        Tensor::from_slice(&self.data)
            .view([
                1,
                self.channels as i64,
                self.height as i64,
                self.width as i64,
            ])
            .to_kind(kind)
    }

    /// Reads one image out of a `C×H×W` (or `1×C×H×W`) tensor.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<ImageTensor> {
        let t = if t.dim() == 4 { t.squeeze_dim(0) } else { t.shallow_clone() };
        let dims = t.size();
        if dims.len() != 3 {
            return Err(Error::shape("C×H×W tensor", format!("{dims:?}")));
        }
        let data: Vec<f32> = Vec::<f32>::try_from(
            &t.detach()
                .to_device(Device::Cpu)
                .to_kind(Kind::Float)
                .contiguous()
                .view([-1]),
        )?;
        ImageTensor::clamped(
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            data,
            range,
        )
    }
}

/// Stacks images into an `N×C×H×W` tensor; all shapes must agree.
pub fn stack_images<'a, I>(images: I, kind: Kind) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut shape = None;
    let mut data = Vec::new();
    let mut n = 0i64;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => {
                return Err(Error::shape(format!("{s:?}"), format!("{:?}", img.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(img.as_slice());
        n += 1;
    }
    let [c, h, w] = shape.ok_or(Error::Empty("image batch"))?;
    Ok(Tensor::from_slice(&data)
        .view([n, c as i64, h as i64, w as i64])
        .to_kind(kind))
}

/// Splits an `N×C×H×W` tensor back into images, clamping into `range`.
pub fn unstack_images(t: &Tensor, range: ValueRange) -> Result<Vec<ImageTensor>> {
    let dims = t.size();
    if dims.len() != 4 {
        return Err(Error::shape("N×C×H×W tensor", format!("{dims:?}")));
    }
    let flat: Vec<f32> = Vec::<f32>::try_from(
        &t.detach()
            .to_device(Device::Cpu)
            .to_kind(Kind::Float)
            .contiguous()
            .view([-1]),
    )?;
    let (c, h, w) = (dims[1] as usize, dims[2] as usize, dims[3] as usize);
    let per = c * h * w;
    flat.chunks(per.max(1))
        .take(dims[0] as usize)
        .map(|chunk| ImageTensor::clamped(c, h, w, chunk.to_vec(), range))
        .collect()
}

/// Converts `[0,1]` pixels to generator space `[-1,1]`.
pub fn pixels_to_signed(xs: &Tensor) -> Tensor {
    xs * 2.0 - 1.0
}

/// Converts generator space `[-1,1]` to `[0,1]` pixels.
pub fn signed_to_pixels(xs: &Tensor) -> Tensor {
    (xs + 1.0) * 0.5
}
