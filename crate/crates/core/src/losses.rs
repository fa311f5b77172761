//! Objectives of the transformation network: feature, perceptual,
//! classification, reconstruction, cycle-consistency and least-squares
//! adversarial losses, and their composition.
//!
//! Networks enter as [`ImageFn`] closures so the same code serves trained
//! models and toy stand-ins. Every image argument is an `N×C×H×W` batch in
//! pixel space; generator closures map pixels to pixels.

use serde::{Deserialize, Serialize};
use tch::{Kind, Reduction, Tensor};

use crate::error::{Error, Result};

/// A batch-to-batch map (generator, feature extractor, classifier or
/// discriminator).
pub type ImageFn<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            gamma1: -1.0,
            gamma2: 0.4,
            gamma3: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.gamma1, self.gamma2, self.gamma3];
        if all.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("loss weights must be finite: {self:?}")))
        }
    }
}

/// How the squared norms of the reconstruction loss are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormReduction {
    /// Mean over every element.
    #[default]
    Mean,
    /// Sum over each image, mean over the batch.
    Sum,
}

impl std::str::FromStr for NormReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(NormReduction::Mean),
            "sum" => Ok(NormReduction::Sum),
            _ => Err(Error::Invalid(format!("unknown reduction `{s}` (mean|sum)"))),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(format!("{:?}", a.size()), format!("{:?}", b.size())));
    }
    Ok(())
}

/// Squared error of `a` against `b` under `reduction`.
pub fn squared_norm_loss(a: &Tensor, b: &Tensor, reduction: NormReduction) -> Result<Tensor> {
    same_shape(a, b)?;
    let d = (a - b).square();
    Ok(match reduction {
        NormReduction::Mean => d.mean(d.kind()),
        NormReduction::Sum => {
            let n = d.size()[0].max(1) as f64;
            d.sum(d.kind()) / n
        }
    })
}

/// Mean squared difference of the feature maps of `x` and `xhat`.
pub fn feature_loss(phi: &ImageFn, x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
    same_shape(x, xhat)?;
    let fx = phi(x)?;
    let fy = phi(xhat)?;
    squared_norm_loss(&fy, &fx, NormReduction::Mean)
}

/// `feat(x, G_AB(x)) + feat(x, G_BA(x_p))`.
pub fn perceptual_loss(
    phi: &ImageFn,
    g_ab: &ImageFn,
    g_ba: &ImageFn,
    x: &Tensor,
    x_p: &Tensor,
) -> Result<Tensor> {
    Ok(feature_loss(phi, x, &g_ab(x)?)? + feature_loss(phi, x, &g_ba(x_p)?)?)
}

/// Mean cross entropy of `logits` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let dims = logits.size();
    if dims.len() != 2 || labels.size() != [dims[0]] {
        return Err(Error::shape(
            "N×K logits with N labels",
            format!("{dims:?} / {:?}", labels.size()),
        ));
    }
    if dims[0] == 0 {
        return Err(Error::Empty("label batch"));
    }
    let lo = labels.min().int64_value(&[]);
    let hi = labels.max().int64_value(&[]);
    for l in [lo, hi] {
        if l < 0 || l >= dims[1] {
            return Err(Error::Label {
                label: l,
                num_classes: dims[1] as usize,
            });
        }
    }
    Ok(logits.cross_entropy_loss::<Tensor>(labels, None, Reduction::Mean, -100, 0.0))
}

/// `CE(h(G_AB(x)), y) + CE(h(G_BA(x_p)), y_p)`. `y_p` are the labels of the
/// protected batch, which may be drawn independently of `x`.
pub fn classification_loss(
    h: &ImageFn,
    g_ab: &ImageFn,
    g_ba: &ImageFn,
    x: &Tensor,
    y: &Tensor,
    x_p: &Tensor,
    y_p: &Tensor,
) -> Result<Tensor> {
    Ok(cross_entropy(&h(&g_ab(x)?)?, y)? + cross_entropy(&h(&g_ba(x_p)?)?, y_p)?)
}

/// `‖G_BA(G_AB(x)) − x‖² + ‖G_AB(G_BA(x_p)) − x_p‖²`.
pub fn reconstruction_loss(
    g_ab: &ImageFn,
    g_ba: &ImageFn,
    x: &Tensor,
    x_p: &Tensor,
    reduction: NormReduction,
) -> Result<Tensor> {
    let a = squared_norm_loss(&g_ba(&g_ab(x)?)?, x, reduction)?;
    let b = squared_norm_loss(&g_ab(&g_ba(x_p)?)?, x_p, reduction)?;
    Ok(a + b)
}

/// `γ₁·l_p + γ₂·l_c + γ₃·l_r`.
pub fn cycle_consistency_loss(l_p: f64, l_c: f64, l_r: f64, w: &LossWeights) -> f64 {
    w.gamma1 * l_p + w.gamma2 * l_c + w.gamma3 * l_r
}

/// Differentiable form of [`cycle_consistency_loss`].
pub fn cycle_consistency(l_p: &Tensor, l_c: &Tensor, l_r: &Tensor, w: &LossWeights) -> Tensor {
    l_p * w.gamma1 + l_c * w.gamma2 + l_r * w.gamma3
}

/// Discriminator term `E[(F(real)−1)²] + E[F(fake)²]` from raw scores.
pub fn lsgan_disc(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    if real_scores.numel() == 0 || fake_scores.numel() == 0 {
        return Err(Error::Empty("discriminator batch"));
    }
    Ok((real_scores - 1.0).square().mean(real_scores.kind()) + fake_scores.square().mean(fake_scores.kind()))
}

/// Generator term `E[(F(fake)−1)²]`.
pub fn lsgan_gen(fake_scores: &Tensor) -> Result<Tensor> {
    if fake_scores.numel() == 0 {
        return Err(Error::Empty("discriminator batch"));
    }
    Ok((fake_scores - 1.0).square().mean(fake_scores.kind()))
}

/// Least-squares adversarial loss: `(gen_term, disc_term)`.
pub fn adversarial_loss(f: &ImageFn, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    if real.size().first() == Some(&0) || fake.size().first() == Some(&0) {
        return Err(Error::Empty("discriminator batch"));
    }
    let fake_scores = f(fake)?;
    let gen = lsgan_gen(&fake_scores)?;
    let disc = lsgan_disc(&f(real)?, &fake_scores)?;
    Ok((gen, disc))
}

/// `λ·(l_ad_A + l_ad_B) + l_cyc`.
pub fn full_objective(parts: &LossReport, w: &LossWeights) -> f64 {
    w.lambda * (parts.l_ad_a + parts.l_ad_b) + parts.l_cyc
}

/// Per-step loss values. `l_cyc` and `l_gan` are always derived from the
/// other fields, so the composition identities hold by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "l_ad_A")]
    pub l_ad_a: f64,
    #[serde(rename = "l_ad_B")]
    pub l_ad_b: f64,
    pub l_p: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub l_cyc: f64,
    pub l_gan: f64,
    /// Discriminator objective of the same step (`F_A + F_B`).
    pub l_disc: f64,
}

impl LossReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        step: usize,
        epoch: usize,
        l_ad_a: f64,
        l_ad_b: f64,
        l_p: f64,
        l_c: f64,
        l_r: f64,
        l_disc: f64,
        w: &LossWeights,
    ) -> Self {
        let mut r = Self {
            step,
            epoch,
            l_ad_a,
            l_ad_b,
            l_p,
            l_c,
            l_r,
            l_cyc: cycle_consistency_loss(l_p, l_c, l_r, w),
            l_gan: 0.0,
            l_disc,
        };
        r.l_gan = full_objective(&r, w);
        r
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_ad_a, self.l_ad_b, self.l_p, self.l_c, self.l_r, self.l_cyc, self.l_gan,
            self.l_disc,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Scalar value of a loss tensor.
pub fn scalar(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}
