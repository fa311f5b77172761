//! Procedural labelled images for smoke runs and tests when the real
//! datasets are not on disk.
//!
//! Each class draws a distinct foreground shape over a smooth two-colour
//! gradient, with random placement, size and colours plus mild noise. Pixels
//! are quantized to multiples of 1/255, so the images survive a round trip
//! through the 8-bit dataset layouts unchanged.

use rand::Rng;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub count: usize,
    pub side: usize,
    pub seed: u64,
    /// Uniform noise amplitude added to every pixel.
    pub noise: f32,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, count: usize, side: usize, seed: u64) -> Self {
        Self {
            num_classes,
            count,
            side,
            seed,
            noise: 0.04,
        }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    HStripes,
    VStripes,
    Ring,
    Cross,
    Diagonal,
    Checker,
    Dots,
}

const SHAPES: [Shape; 10] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::HStripes,
    Shape::VStripes,
    Shape::Ring,
    Shape::Cross,
    Shape::Diagonal,
    Shape::Checker,
    Shape::Dots,
];

fn inside(shape: Shape, u: f32, v: f32, r: f32) -> bool {
    // (u, v) relative to the shape centre, r its radius; all in pixels.
    let d = (u * u + v * v).sqrt();
    match shape {
        Shape::Disk => d <= r,
        Shape::Square => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,
        Shape::Triangle => v <= r * 0.8 && v >= -r && u.abs() <= (v + r) * 0.6,
        Shape::HStripes => (v / (r * 0.35)).floor() as i32 % 2 == 0,
        Shape::VStripes => (u / (r * 0.35)).floor() as i32 % 2 == 0,
        Shape::Ring => d <= r && d >= r * 0.55,
        Shape::Cross => (u.abs() <= r * 0.25 || v.abs() <= r * 0.25) && d <= r * 1.2,
        Shape::Diagonal => (u - v).abs() <= r * 0.4,
        Shape::Checker => {
            let cell = (r * 0.5).max(1.0);
            ((u / cell).floor() as i32 + (v / cell).floor() as i32).rem_euclid(2) == 0
        }
        Shape::Dots => {
            let a = ((u - r * 0.5).powi(2) + v * v).sqrt();
            let b = ((u + r * 0.5).powi(2) + v * v).sqrt();
            a <= r * 0.4 || b <= r * 0.4
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates one image of class `label`.
pub fn synth_image<R: Rng + ?Sized>(
    label: usize,
    num_classes: usize,
    side: usize,
    noise: f32,
    rng: &mut R,
) -> Result<ImageTensor> {
    let shape = SHAPES[label % SHAPES.len()];
    // Classes beyond the ten shapes are told apart by a hue offset.
    let hue_group = (label / SHAPES.len()) as f32 / num_classes.div_ceil(SHAPES.len()) as f32;
    let s = side as f32;
    let bg0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.5));
    let bg1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.5));
    let mut fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
    fg[(label / SHAPES.len()) % 3] = (fg[0] * (1.0 - hue_group) + hue_group).min(1.0);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let r = rng.gen_range(0.22..0.34) * s;
    let cx = rng.gen_range(0.35..0.65) * s;
    let cy = rng.gen_range(0.35..0.65) * s;
    let mut data = vec![0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let t = (x as f32 * ca + y as f32 * sa) / s * 0.5 + 0.5;
            let on = inside(shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
            for c in 0..3 {
                let base = if on {
                    fg[c]
                } else {
                    bg0[c] * (1.0 - t) + bg1[c] * t
                };
                let n = if noise > 0.0 {
                    rng.gen_range(-noise..=noise)
                } else {
                    0.0
                };
                data[(c * side + y) * side + x] = quantize(base + n);
            }
        }
    }
    ImageTensor::new(3, side, side, data, ValueRange::UNIT)
}

/// Balanced dataset: item `i` has label `i mod num_classes`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.num_classes == 0 || spec.side < 4 {
        return Err(Error::Invalid(
            "synthetic data needs at least one class and side >= 4".into(),
        ));
    }
    let mut rng = SeedStream::new(spec.seed).rng("synthetic", 0);
    let items = (0..spec.count)
        .map(|i| {
            let label = i % spec.num_classes;
            Ok((
                synth_image(label, spec.num_classes, spec.side, spec.noise, &mut rng)?,
                label,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(
        format!("synthetic-{}c-{}px", spec.num_classes, spec.side),
        spec.num_classes,
        items,
    )
}
