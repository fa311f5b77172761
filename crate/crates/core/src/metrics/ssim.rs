use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// SSIM constants. Images are mapped to `[0, 1]` before comparison, so the
/// dynamic range is 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    /// Compare BT.601 luma instead of averaging the RGB channels.
    pub luminance_only: bool,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            luminance_only: false,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Invalid(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.window_sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::Invalid("SSIM constants must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all windows of one plane pair.
fn plane_ssim(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams, taps: &[f64]) -> f64 {
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, _, _) = filter(a, h, w, taps);
    let (mu_b, _, _) = filter(b, h, w, taps);
    let (e_aa, _, _) = filter(&aa, h, w, taps);
    let (e_bb, _, _) = filter(&bb, h, w, taps);
    let (e_ab, _, _) = filter(&ab, h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / n as f64
}

fn unit_planes(img: &ImageTensor, luminance: bool) -> Vec<Vec<f64>> {
    let img = if img.range() == ValueRange::UNIT {
        img.clone()
    } else {
        img.remap(ValueRange::UNIT)
    };
    let [c, h, w] = img.shape();
    let data = img.as_slice();
    let planes: Vec<Vec<f64>> = (0..c)
        .map(|ch| data[ch * h * w..(ch + 1) * h * w].iter().map(|v| *v as f64).collect())
        .collect();
    if luminance && c == 3 {
        let y = (0..h * w)
            .map(|i| 0.299 * planes[0][i] + 0.587 * planes[1][i] + 0.114 * planes[2][i])
            .collect();
        vec![y]
    } else {
        planes
    }
}

/// Gaussian-windowed SSIM, computed per channel and averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    a.same_shape(b)?;
    let [_, h, w] = a.shape();
    if h < p.window || w < p.window {
        return Err(Error::Invalid(format!(
            "SSIM window {} larger than the {h}x{w} image",
            p.window
        )));
    }
    let taps = p.taps();
    let pa = unit_planes(a, p.luminance_only);
    let pb = unit_planes(b, p.luminance_only);
    let sum: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| plane_ssim(x, y, h, w, p, &taps))
        .sum();
    Ok(sum / pa.len() as f64)
}

/// Arithmetic mean of per-pair SSIM values; also returns them.
pub fn mean_ssim<'a, I>(pairs: I, p: &SsimParams) -> Result<(f64, Vec<f64>)>
where
    I: IntoIterator<Item = (&'a ImageTensor, &'a ImageTensor)>,
{
    let values = pairs
        .into_iter()
        .map(|(a, b)| ssim(a, b, p))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Empty("SSIM pair list"));
    }
    Ok((values.iter().sum::<f64>() / values.len() as f64, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(side: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * side * side).map(|_| rng.gen::<f32>()).collect();
        ImageTensor::new(3, side, side, data, ValueRange::UNIT).unwrap()
    }

    #[test]
    fn self_and_constant_similarity() {
        let p = SsimParams::default();
        let a = random(16, 1);
        assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
        let c = ImageTensor::filled(3, 12, 12, 0.3).unwrap();
        assert_eq!(ssim(&c, &c, &p).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_and_bounded() {
        let p = SsimParams::default();
        let (a, b) = (random(20, 2), random(20, 3));
        let ab = ssim(&a, &b, &p).unwrap();
        assert!((ab - ssim(&b, &a, &p).unwrap()).abs() <= 1e-12);
        assert!((-1.0..=1.0).contains(&ab) && ab < 0.2);
    }

    #[test]
    fn window_checks() {
        let p = SsimParams::default();
        assert!(ssim(&random(8, 0), &random(8, 1), &p).is_err());
        let even = SsimParams { window: 4, ..p };
        assert!(even.validate().is_err());
        assert!(mean_ssim(std::iter::empty(), &p).is_err());
    }

    #[test]
    fn signed_images_are_remapped() {
        let a = random(16, 4);
        let s = a.remap(ValueRange::SIGNED);
        let p = SsimParams::default();
        assert!((ssim(&a, &s, &p).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn luminance_only_on_gray_matches_rgb() {
        let g = random(16, 5);
        let plane: Vec<f32> = g.as_slice()[..256].to_vec();
        let data = [plane.clone(), plane.clone(), plane].concat();
        let a = ImageTensor::new(3, 16, 16, data, ValueRange::UNIT).unwrap();
        let b = random(16, 6);
        let lum = SsimParams { luminance_only: true, ..Default::default() };
        let l = ssim(&a, &a, &lum).unwrap();
        assert_eq!(l, 1.0);
        assert!(ssim(&a, &b, &lum).unwrap().is_finite());
    }
}
