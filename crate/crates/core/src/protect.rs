//! Preliminary visual protection: projected sign-gradient *descent* on the
//! classifier loss inside an L∞ ball around each image.

use serde::{Deserialize, Serialize};
use tch::{Kind, Reduction, Tensor};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::{stack_images, unstack_images, ImageTensor, ValueRange};
use crate::models::{ModelHandle, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// L∞ radius in pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self::new(0.3)
    }
}

impl PerturbationSpec {
    /// `alpha = epsilon / 10`, 50 iterations, pixel range `[0, 1]`.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: epsilon / 10.0,
            iterations: 50,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn range(&self) -> Result<ValueRange> {
        ValueRange::new(self.clamp_lo as f32, self.clamp_hi as f32)
    }

    /// Projection needs only a radius and a range.
    fn validate_projection(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        self.range().map(|_| ())
    }

    /// Full check for the iterative procedure. Zero iterations is allowed
    /// (the identity).
    pub fn validate(&self) -> Result<()> {
        self.validate_projection()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.alpha > 2.0 * self.epsilon {
            return Err(Error::Invalid(format!(
                "alpha {} exceeds 2·epsilon {}",
                self.alpha,
                2.0 * self.epsilon
            )));
        }
        Ok(())
    }
}

/// Nearest point to `x_p` in the ε-ball around `x` intersected with the
/// pixel range (batched).
pub fn project_linf_tensor(x_p: &Tensor, x: &Tensor, spec: &PerturbationSpec) -> Result<Tensor> {
    spec.validate_projection()?;
    if x_p.size() != x.size() {
        return Err(Error::shape(format!("{:?}", x.size()), format!("{:?}", x_p.size())));
    }
    let delta = (x_p - x).clamp(-spec.epsilon, spec.epsilon);
    Ok((x + delta).clamp(spec.clamp_lo, spec.clamp_hi))
}

pub fn project_linf(
    x_p: &ImageTensor,
    x: &ImageTensor,
    spec: &PerturbationSpec,
) -> Result<ImageTensor> {
    x.same_shape(x_p)?;
    let out = project_linf_tensor(&x_p.to_tensor(Kind::Float), &x.to_tensor(Kind::Float), spec)?;
    ImageTensor::from_tensor(&out, spec.range()?)
}

/// Loss whose gradient drives the descent: maps a batch to a scalar that is
/// a sum of independent per-image terms.
pub type BatchLoss<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// One step `Π(x_t − α·sign(∇L(x_t)))`, with `sign(0) = 0`.
pub fn pgd_step_with(
    loss: &BatchLoss,
    x_t: &Tensor,
    x: &Tensor,
    spec: &PerturbationSpec,
) -> Result<Tensor> {
    let xt = x_t.detach().set_requires_grad(true);
    let l = loss(&xt)?;
    let g = Tensor::run_backward(&[&l], &[&xt], false, false)
        .pop()
        .ok_or_else(|| Error::Invalid("loss does not depend on its input".into()))?;
    let finite = g.isfinite().all().int64_value(&[]) != 0;
    if !finite {
        return Err(Error::NonFinite(format!(
            "protection gradient (loss = {})",
            l.to_kind(Kind::Double).double_value(&[])
        )));
    }
    let stepped = tch::no_grad(|| x_t.detach() - g.sign() * spec.alpha);
    project_linf_tensor(&stepped, x, spec)
}

/// Runs `spec.iterations` steps from `x` (batched).
pub fn protect_with(loss: &BatchLoss, x: &Tensor, spec: &PerturbationSpec) -> Result<Tensor> {
    spec.validate()?;
    let x = x.detach();
    let mut cur = x.copy();
    for _ in 0..spec.iterations {
        cur = pgd_step_with(loss, &cur, &x, spec)?;
    }
    Ok(cur)
}

/// Summed cross entropy of `h` on `[0,1]` pixels; each image contributes an
/// independent term, so gradients do not depend on batch composition.
pub fn classifier_loss<'a>(h: &'a ModelHandle, labels: &'a Tensor) -> impl Fn(&Tensor) -> Result<Tensor> + 'a {
    move |xs| {
        let logits = h.classify_pixels(xs)?;
        Ok(logits
            .to_kind(Kind::Float)
            .cross_entropy_loss::<Tensor>(labels, None, Reduction::Sum, -100, 0.0))
    }
}

fn check_classifier(h: &ModelHandle, labels: &[usize]) -> Result<()> {
    h.expect_kind(ModelKind::Classifier)?;
    let k = h.spec().num_classes;
    if let Some(l) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Label {
            label: *l as i64,
            num_classes: k,
        });
    }
    Ok(())
}

fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_slice(&labels.iter().map(|l| *l as i64).collect::<Vec<_>>())
}

pub fn pgd_protect_step(
    x_t: &ImageTensor,
    x: &ImageTensor,
    y: usize,
    h_theta: &ModelHandle,
    spec: &PerturbationSpec,
) -> Result<ImageTensor> {
    spec.validate()?;
    check_classifier(h_theta, &[y])?;
    x.same_shape(x_t)?;
    let labels = label_tensor(&[y]);
    let out = pgd_step_with(
        &classifier_loss(h_theta, &labels),
        &x_t.to_tensor(Kind::Float),
        &x.to_tensor(Kind::Float),
        spec,
    )?;
    ImageTensor::from_tensor(&out, spec.range()?)
}

pub fn protect_image(
    x: &ImageTensor,
    y: usize,
    h_theta: &ModelHandle,
    spec: &PerturbationSpec,
) -> Result<ImageTensor> {
    check_classifier(h_theta, &[y])?;
    let labels = label_tensor(&[y]);
    let out = protect_with(&classifier_loss(h_theta, &labels), &x.to_tensor(Kind::Float), spec)?;
    ImageTensor::from_tensor(&out, spec.range()?)
}

/// Protects every image; labels and order are kept.
pub fn protect_dataset(
    d: &LabeledDataset,
    h_theta: &ModelHandle,
    spec: &PerturbationSpec,
    batch: usize,
) -> Result<LabeledDataset> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let name = format!("{}-protected", d.name());
    if d.is_empty() {
        return LabeledDataset::empty(name, d.num_classes());
    }
    check_classifier(h_theta, &d.labels())?;
    let range = spec.range()?;
    let mut items = Vec::with_capacity(d.len());
    for chunk in d.items().chunks(batch) {
        let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
        let xs = stack_images(chunk.iter().map(|(i, _)| i), Kind::Float)?;
        let yt = label_tensor(&labels);
        let out = protect_with(&classifier_loss(h_theta, &yt), &xs, spec)?;
        for (img, l) in unstack_images(&out, range)?.into_iter().zip(labels) {
            items.push((img, l));
        }
    }
    LabeledDataset::new(name, d.num_classes(), items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetworkSpec;

    fn scalar_spec(eps: f64, alpha: f64) -> PerturbationSpec {
        PerturbationSpec {
            epsilon: eps,
            alpha,
            iterations: 1,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
        }
    }

    fn one(v: f64) -> Tensor {
        Tensor::from_slice(&[v]).view([1, 1, 1, 1])
    }

    #[test]
    fn projection_examples() {
        let s = scalar_spec(0.1, 0.01);
        let r = project_linf_tensor(&one(0.9), &one(0.5), &s).unwrap();
        assert!((r.double_value(&[0, 0, 0, 0]) - 0.6).abs() < 1e-12);
        let inside = project_linf_tensor(&one(0.55), &one(0.5), &s).unwrap();
        assert_eq!(inside.double_value(&[0, 0, 0, 0]), 0.55);
        let zero = project_linf_tensor(&one(0.9), &one(0.5), &scalar_spec(0.0, 0.01)).unwrap();
        assert_eq!(zero.double_value(&[0, 0, 0, 0]), 0.5);
    }

    #[test]
    fn step_descends_on_scalar_model() {
        // L(x) = 2x, so g = +2 and the step moves x down by alpha.
        let loss = |xs: &Tensor| Ok((xs * 2.0).sum(Kind::Double));
        let s = scalar_spec(0.03, 0.01);
        let out = pgd_step_with(&loss, &one(0.5), &one(0.5), &s).unwrap();
        assert!((out.double_value(&[0, 0, 0, 0]) - 0.49).abs() < 1e-12);
        assert!(scalar_loss(&loss, &out) < scalar_loss(&loss, &one(0.5)));
        let flat = |xs: &Tensor| Ok((xs * 0.0).sum(Kind::Double));
        let still = pgd_step_with(&flat, &one(0.48), &one(0.5), &s).unwrap();
        assert_eq!(still.double_value(&[0, 0, 0, 0]), 0.48);
    }

    fn scalar_loss(f: &BatchLoss, x: &Tensor) -> f64 {
        f(x).unwrap().double_value(&[])
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let loss = |xs: &Tensor| Ok((xs * f64::INFINITY).sum(Kind::Double));
        let err = pgd_step_with(&loss, &one(0.0), &one(0.0), &scalar_spec(0.1, 0.01)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn image_level_contract() {
        let h = ModelHandle::build(&NetworkSpec::resnet18(3).with_width(2).with_seed(1)).unwrap();
        let x = ImageTensor::new(
            3,
            8,
            8,
            (0..192).map(|i| (i % 17) as f32 / 16.0).collect(),
            ValueRange::UNIT,
        )
        .unwrap();
        let spec = PerturbationSpec::new(0.2).with_iterations(5);
        let p = protect_image(&x, 1, &h, &spec).unwrap();
        assert!(p.linf_distance(&x).unwrap() <= 0.2 + 1e-6);
        assert_eq!(protect_image(&x, 1, &h, &spec).unwrap(), p);
        let unchanged = protect_image(&x, 1, &h, &spec.with_iterations(0)).unwrap();
        assert_eq!(unchanged, x);
        let wide = PerturbationSpec::new(2.0).with_iterations(3);
        let w = protect_image(&x, 0, &h, &wide).unwrap();
        assert!(w.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(protect_image(&x, 3, &h, &spec).is_err());
        let step = pgd_protect_step(&x, &x, 2, &h, &spec).unwrap();
        assert!(step.linf_distance(&x).unwrap() <= spec.alpha as f32 + 1e-6);
    }

    #[test]
    fn dataset_keeps_labels_and_handles_empty() {
        let h = ModelHandle::build(&NetworkSpec::resnet18(2).with_width(2)).unwrap();
        let empty = LabeledDataset::empty("e", 2).unwrap();
        assert!(protect_dataset(&empty, &h, &PerturbationSpec::default(), 4)
            .unwrap()
            .is_empty());
        let d = crate::data::synth::synthetic_dataset(&crate::data::synth::SyntheticSpec::new(2, 5, 8, 0))
            .unwrap();
        let p = protect_dataset(&d, &h, &PerturbationSpec::new(0.1).with_iterations(2), 2).unwrap();
        assert_eq!(p.labels(), d.labels());
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbationSpec::new(0.3).validate().is_ok());
        assert!(PerturbationSpec::new(0.3).with_alpha(0.7).validate().is_err());
        assert!(PerturbationSpec::new(0.0).validate().is_err());
    }
}
