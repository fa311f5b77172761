//! Classifier training and evaluation on plain, protected or transformed
//! images.
//!
//! Per-image path: augmentation (crop, flip) and normalization, then the
//! optional frozen transform, then the classifier.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{Kind, Reduction, Tensor};

use crate::data::{augment, channel_stats, AugmentSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::image::{stack_images, Normalization};
use crate::losses::cross_entropy;
use crate::models::{config_hash, Checkpoint, CheckpointMeta, ModelHandle, ModelKind, NetworkSpec};
use crate::optim::{Sgd, StepSchedule};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub network: NetworkSpec,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// `None`: crop padding 4 and flips, normalized with the training set's
    /// channel statistics (or to `[-1,1]` when a transform is used).
    pub augment: Option<AugmentSpec>,
    pub seed: u64,
}

impl ClassifyConfig {
    pub fn new(network: NetworkSpec) -> Self {
        Self {
            network,
            epochs: 200,
            lr: 0.1,
            lr_drop_epochs: vec![60, 120, 160],
            lr_drop_factor: 5.0,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 128,
            augment: None,
            seed: 0,
        }
    }

    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::new(self.lr, self.lr_drop_epochs.clone(), self.lr_drop_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.kind() != ModelKind::Classifier {
            return Err(Error::Invalid(format!("{} is not a classifier", self.network.arch)));
        }
        self.network.validate()?;
        self.schedule()?.check_within(self.epochs)?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("classify batch_size must be >= 1".into()));
        }
        if let Some(a) = &self.augment {
            a.normalize.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

/// Input normalization for a classifier, given whether a transform sits in
/// front of it (transforms take `[-1,1]` input).
fn resolve_augment(
    cfg: &ClassifyConfig,
    train: &LabeledDataset,
    transformed: bool,
) -> Result<AugmentSpec> {
    let channels = train.image_shape().map(|s| s[0]).unwrap_or(3);
    let mut spec = match &cfg.augment {
        Some(a) => a.clone(),
        None => AugmentSpec::cifar(channel_stats(train)?, cfg.seed),
    };
    if transformed {
        spec.normalize = Normalization::signed_unit(channels);
    }
    Ok(spec)
}

fn check_transform(t: Option<&ModelHandle>) -> Result<()> {
    if let Some(g) = t {
        g.expect_kind(ModelKind::Generator)?;
    }
    Ok(())
}

/// Model input for already-normalized images.
fn apply_transform(t: Option<&ModelHandle>, xs: &Tensor) -> Result<Tensor> {
    match t {
        Some(g) => tch::no_grad(|| g.forward_eval(xs)),
        None => Ok(xs.shallow_clone()),
    }
}

fn labels_tensor(labels: impl Iterator<Item = usize>) -> Tensor {
    Tensor::from_slice(&labels.map(|l| l as i64).collect::<Vec<_>>())
}

/// Trains a classifier with SGD and the step schedule. With `test`, records
/// test accuracy after each epoch. With `out`, writes `history.jsonl` and a
/// `last-good.safetensors` checkpoint after every epoch.
pub fn train_classifier(
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    transform: Option<&ModelHandle>,
    cfg: &ClassifyConfig,
    out: Option<&Path>,
) -> Result<(ModelHandle, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_transform(transform)?;
    if train.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    if train.num_classes() != cfg.network.num_classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, network {}",
            train.num_classes(),
            cfg.network.num_classes
        )));
    }
    let stream = SeedStream::new(cfg.seed);
    let aug = resolve_augment(cfg, train, transform.is_some())?;
    let spec = cfg.network.clone().with_seed(stream.derive("classifier-init", 0));
    let mut model = ModelHandle::build(&spec)?;
    model.set_input_norm(aug.normalize.clone())?;
    let schedule = cfg.schedule()?;
    let mut opt = Sgd::new(model.trainable(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let hash = config_hash(cfg)?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("history.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let items = train.items();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        opt.lr = lr;
        let mut rng = stream.rng("classify-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        model.set_train(true);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs = chunk
                .iter()
                .map(|i| augment(&items[*i].0, &aug, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let xs = apply_transform(transform, &stack_images(&imgs, Kind::Float)?)?;
            let ys = labels_tensor(chunk.iter().map(|i| items[*i].1));
            opt.zero_grad();
            let loss = cross_entropy(&model.forward(&xs)?, &ys)?;
            let v = loss.double_value(&[]);
            if !v.is_finite() {
                let last = out
                    .map(|d| d.join("last-good.safetensors").display().to_string())
                    .unwrap_or_else(|| "none".into());
                return Err(Error::NonFinite(format!(
                    "classifier loss {v} at epoch {epoch}; last good checkpoint: {last}"
                )));
            }
            loss.backward();
            opt.step();
            total += v * chunk.len() as f64;
            seen += chunk.len();
        }
        model.set_train(false);
        let test_accuracy = match test {
            Some(t) => Some(evaluate_accuracy(&model, t, transform, cfg.batch_size)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: total / seen as f64,
            test_accuracy,
        };
        log::info!("classify epoch {epoch}: loss {:.4} acc {:?}", rec.train_loss, rec.test_accuracy);
        if let (Some(w), Some(dir)) = (log.as_mut(), out) {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(dir, e))?;
            w.flush().map_err(|e| Error::io(dir, e))?;
            save_classifier(&dir.join("last-good.safetensors"), &model, &hash, epoch + 1)?;
        }
        history.push(rec);
    }
    model.set_train(false);
    Ok((model, history))
}

/// Logits for a dataset, evaluated in batches, in eval mode.
pub fn logits(
    model: &ModelHandle,
    d: &LabeledDataset,
    transform: Option<&ModelHandle>,
    batch: usize,
) -> Result<Tensor> {
    model.expect_kind(ModelKind::Classifier)?;
    check_transform(transform)?;
    if d.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut outs = Vec::new();
    for chunk in d.items().chunks(batch.max(1)) {
        let px = stack_images(chunk.iter().map(|(i, _)| i), Kind::Float)?;
        let out = tch::no_grad(|| -> Result<Tensor> {
            match transform {
                // Transformed inputs are fed to the classifier as produced.
                Some(g) => model.forward_eval(&g.forward_eval(&Normalization::signed_unit(3).apply(&px))?),
                None => model.classify_pixels(&px),
            }
        })?;
        outs.push(out);
    }
    Ok(Tensor::cat(&outs, 0))
}

pub fn predict(
    model: &ModelHandle,
    d: &LabeledDataset,
    transform: Option<&ModelHandle>,
    batch: usize,
) -> Result<Vec<usize>> {
    let pred = logits(model, d, transform, batch)?.argmax(1, false);
    Ok(Vec::<i64>::try_from(&pred)?.into_iter().map(|p| p as usize).collect())
}

/// Top-1 accuracy in `[0, 1]`; no augmentation.
pub fn evaluate_accuracy(
    model: &ModelHandle,
    test: &LabeledDataset,
    transform: Option<&ModelHandle>,
    batch: usize,
) -> Result<f64> {
    let pred = predict(model, test, transform, batch)?;
    let correct = pred.iter().zip(test.labels()).filter(|(p, l)| **p == *l).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean cross entropy of the classifier on `[0,1]` images.
pub fn mean_cross_entropy(model: &ModelHandle, d: &LabeledDataset, batch: usize) -> Result<f64> {
    let l = logits(model, d, None, batch)?;
    let ys = labels_tensor(d.labels().into_iter());
    Ok(l
        .cross_entropy_loss::<Tensor>(&ys, None, Reduction::Mean, -100, 0.0)
        .double_value(&[]))
}

pub fn save_classifier(path: &Path, model: &ModelHandle, config_hash: &str, epoch: usize) -> Result<()> {
    let mut ck = Checkpoint::new(&CheckpointMeta {
        config_hash: config_hash.into(),
        epoch,
    });
    ck.insert_model("classifier", model)?;
    ck.save(path)
}

pub fn load_classifier(path: &Path) -> Result<ModelHandle> {
    let m = Checkpoint::load(path)?.load_model("classifier")?;
    m.expect_kind(ModelKind::Classifier)?;
    Ok(m)
}
