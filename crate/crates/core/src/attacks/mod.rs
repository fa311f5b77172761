//! Ciphertext-only reconstruction attacks against pluggable encryption
//! schemes: an unpaired GAN attack and a supervised paired attack.

mod schemes;

pub use schemes::{
    encrypt_dataset, scheme_by_name, BlockShuffle, EncryptionScheme, IdentityScheme, KeyMode,
    NegPosFlip, TransformScheme,
};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{Kind, Reduction, Tensor};

use crate::data::{split_halves, LabeledDataset};
use crate::error::{Error, Result};
use crate::image::{pixels_to_signed, stack_images, ImageTensor};
use crate::metrics::{ssim, SsimParams};
use crate::models::{Checkpoint, CheckpointMeta, ModelHandle, ModelKind, NetworkSpec};
use crate::optim::{Adam, Sgd, StepSchedule};
use crate::rng::SeedStream;
use crate::transform::transform;

fn images_tensor(d: &LabeledDataset) -> Result<Tensor> {
    Ok(pixels_to_signed(&stack_images(d.images(), Kind::Float)?))
}

fn select(t: &Tensor, idx: &[usize]) -> Tensor {
    let idx = Tensor::from_slice(&idx.iter().map(|i| *i as i64).collect::<Vec<_>>());
    t.index_select(0, &idx)
}

fn save_models(path: &Path, models: &[(&str, &ModelHandle)], epoch: usize, hash: &str) -> Result<()> {
    let mut ck = Checkpoint::new(&CheckpointMeta {
        config_hash: hash.into(),
        epoch,
    });
    for (name, m) in models {
        ck.insert_model(name, m)?;
    }
    ck.save(path)
}

/// Loads the attack generator from a checkpoint written by either trainer.
pub fn load_attack_generator(path: &Path) -> Result<ModelHandle> {
    Checkpoint::load(path)?.load_model("g_att")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            seed: 0,
            generator: NetworkSpec::conv_encoder_decoder(),
            discriminator: NetworkSpec::att_discriminator(),
        }
    }
}

impl GaConfig {
    /// Same settings with the U-Net generator used against learned transforms.
    pub fn against_transform(self) -> Self {
        Self {
            generator: NetworkSpec::unet_generator()
                .with_width(self.generator.base_width)
                .with_residual(true),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Invalid("GA epochs, batch_size and lr must be positive".into()));
        }
        if self.generator.kind() != ModelKind::Generator
            || self.discriminator.kind() != ModelKind::Discriminator
        {
            return Err(Error::Invalid("GA needs a generator and a discriminator".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug)]
pub struct GaOutcome {
    pub g_att: ModelHandle,
    pub d_att: ModelHandle,
    pub history: Vec<GaEpoch>,
}

/// GAN attack: splits `t` into halves, encrypts the first and trains
/// `G_att` to map it toward the plain distribution of the second.
pub fn train_ga(
    scheme: &dyn EncryptionScheme,
    t: &LabeledDataset,
    cfg: &GaConfig,
    out: Option<&Path>,
) -> Result<GaOutcome> {
    let (t1, t2) = split_halves(t, cfg.seed)?;
    let encrypted = encrypt_dataset(scheme, &t1)?;
    drop(t1);
    train_ga_ciphertext_only(&encrypted, &t2, cfg, out)
}

fn bce(logits: &Tensor, target: f64) -> Tensor {
    let y = logits.full_like(target);
    logits.binary_cross_entropy_with_logits::<Tensor>(&y, None, None, Reduction::Mean)
}

/// The GA training loop proper. It receives only ciphertexts and unrelated
/// plain images, never the plain counterparts of the ciphertexts.
pub fn train_ga_ciphertext_only(
    encrypted: &LabeledDataset,
    plain: &LabeledDataset,
    cfg: &GaConfig,
    out: Option<&Path>,
) -> Result<GaOutcome> {
    cfg.validate()?;
    if encrypted.is_empty() || plain.is_empty() {
        return Err(Error::Empty("GA training halves"));
    }
    let stream = SeedStream::new(cfg.seed);
    let g = ModelHandle::build(&cfg.generator.clone().with_seed(stream.derive("g_att", 0)))?;
    let mut d = ModelHandle::build(&cfg.discriminator.clone().with_seed(stream.derive("d_att", 0)))?;
    let mut opt_g = Adam::new(g.trainable(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(d.trainable(), cfg.lr, cfg.beta1, cfg.beta2);
    let enc = images_tensor(encrypted)?;
    let real = images_tensor(plain)?;
    let hash = crate::models::config_hash(cfg)?;
    let (ne, nr) = (enc.size()[0] as usize, real.size()[0] as usize);
    let mut history = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 0..cfg.epochs {
        let mut rng = stream.rng("ga-epoch", epoch as u64);
        let mut ie: Vec<usize> = (0..ne).collect();
        let mut ir: Vec<usize> = (0..nr).collect();
        ie.shuffle(&mut rng);
        ir.shuffle(&mut rng);
        let (mut dl, mut gl, mut steps) = (0.0, 0.0, 0usize);
        d.set_train(true);
        for (k, ce) in ie.chunks(cfg.batch_size).enumerate() {
            // The plain half is cycled when it is shorter than the cipher half.
            let cr: Vec<usize> = (0..ce.len()).map(|j| ir[(k * cfg.batch_size + j) % nr]).collect();
            let xe = select(&enc, ce);
            let xr = select(&real, &cr);
            let fake = tch::no_grad(|| g.forward(&xe))?;
            opt_d.zero_grad();
            let d_loss = bce(&d.discriminator_scores(&xr)?, 1.0) + bce(&d.discriminator_scores(&fake)?, 0.0);
            let dv = d_loss.double_value(&[]);
            d_loss.backward();
            opt_d.step();
            opt_g.zero_grad();
            let g_loss = bce(&d.discriminator_scores(&g.forward(&xe)?)?, 1.0);
            let gv = g_loss.double_value(&[]);
            if !(dv.is_finite() && gv.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "GA losses d={dv} g={gv} at epoch {epoch}; last good checkpoint: {}",
                    out.map(|o| o.join("last-good.safetensors").display().to_string())
                        .unwrap_or_else(|| "none".into())
                )));
            }
            g_loss.backward();
            opt_g.step();
            dl += dv;
            gl += gv;
            steps += 1;
        }
        d.set_train(false);
        let rec = GaEpoch {
            epoch,
            d_loss: dl / steps as f64,
            g_loss: gl / steps as f64,
        };
        log::info!("GA epoch {epoch}: d {:.4} g {:.4}", rec.d_loss, rec.g_loss);
        history.push(rec);
        if let Some(dir) = out {
            save_models(&dir.join("last-good.safetensors"), &[("g_att", &g), ("d_att", &d)], epoch + 1, &hash)?;
        }
    }
    Ok(GaOutcome {
        g_att: g,
        d_att: d,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub generator: NetworkSpec,
}

impl Default for PairedConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            lr: 0.1,
            lr_drop_epochs: vec![40, 60],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 128,
            seed: 0,
            generator: NetworkSpec::conv_encoder_decoder(),
        }
    }
}

impl PairedConfig {
    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::new(self.lr, self.lr_drop_epochs.clone(), self.lr_drop_factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub mse: f64,
}

/// Pairs `(plain, encrypted)` drawn from a keyed scheme. Keyless schemes
/// are refused; pass explicit pairs to [`train_paired_attack`] instead.
pub fn scheme_pairs(
    scheme: &dyn EncryptionScheme,
    t: &LabeledDataset,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    if !scheme.keyed() {
        return Err(Error::Invalid(format!(
            "paired attack is not applicable to keyless scheme `{}`; supply pairs explicitly",
            scheme.name()
        )));
    }
    let enc = encrypt_dataset(scheme, t)?;
    Ok(t.images().cloned().zip(enc.images().cloned()).collect())
}

/// Supervised reconstruction: minimizes the MSE between `G_att(encrypted)`
/// and the plain image with SGD and a step schedule.
pub fn train_paired_attack(
    pairs: &[(ImageTensor, ImageTensor)],
    cfg: &PairedConfig,
    out: Option<&Path>,
) -> Result<(ModelHandle, Vec<PairedEpoch>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("attack pair list"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be >= 1".into()));
    }
    cfg.generator.validate()?;
    let schedule = cfg.schedule()?;
    schedule.check_within(cfg.epochs)?;
    let stream = SeedStream::new(cfg.seed);
    let g = ModelHandle::build(&cfg.generator.clone().with_seed(stream.derive("g_att", 0)))?;
    g.expect_kind(ModelKind::Generator)?;
    let mut opt = Sgd::new(g.trainable(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let plain = pixels_to_signed(&stack_images(pairs.iter().map(|p| &p.0), Kind::Float)?);
    let enc = pixels_to_signed(&stack_images(
        pairs.iter().map(|p| &p.1),
        Kind::Float,
    )?);
    if plain.size() != enc.size() {
        return Err(Error::shape(format!("{:?}", plain.size()), format!("{:?}", enc.size())));
    }
    let hash = crate::models::config_hash(cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        opt.lr = lr;
        let mut rng = stream.rng("paired-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            opt.zero_grad();
            let loss = (g.forward(&select(&enc, chunk))? - select(&plain, chunk))
                .square()
                .mean(Kind::Float);
            let v = loss.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("paired attack loss {v} at epoch {epoch}")));
            }
            loss.backward();
            opt.step();
            total += v * chunk.len() as f64;
            n += chunk.len();
        }
        history.push(PairedEpoch {
            epoch,
            lr,
            mse: total / n as f64,
        });
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_models(&dir.join("last-good.safetensors"), &[("g_att", &g)], epoch + 1, &hash)?;
        }
    }
    Ok((g, history))
}

/// `G_att` applied to one ciphertext, returned as `[0,1]` pixels.
pub fn reconstruct(g_att: &ModelHandle, encrypted: &ImageTensor) -> Result<ImageTensor> {
    transform(g_att, encrypted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scheme: String,
    pub attack: String,
    pub dataset: String,
    pub mean_ssim: f64,
    pub per_image: Vec<f64>,
}

impl AttackReport {
    /// Writes `report.json` and the `per_image.csv` sidecar (`index,ssim`).
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("per_image.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["index", "ssim"])?;
        for (i, v) in self.per_image.iter().enumerate() {
            w.write_record([i.to_string(), format!("{v}")])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok((json, csv_path))
    }
}

/// Mean SSIM between each test image and `G_att(Enc(x))`.
pub fn evaluate_attack(
    g_att: &ModelHandle,
    scheme: &dyn EncryptionScheme,
    test: &LabeledDataset,
    attack: &str,
    params: &SsimParams,
) -> Result<AttackReport> {
    if test.is_empty() {
        return Err(Error::Empty("attack test set"));
    }
    let enc = encrypt_dataset(scheme, test)?;
    let per_image = test
        .images()
        .zip(enc.images())
        .map(|(x, e)| ssim(x, &reconstruct(g_att, e)?, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport {
        scheme: scheme.name().into(),
        attack: attack.into(),
        dataset: test.name().into(),
        mean_ssim: per_image.iter().sum::<f64>() / per_image.len() as f64,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthetic_dataset, SyntheticSpec};

    fn tiny_ga() -> GaConfig {
        GaConfig {
            epochs: 1,
            batch_size: 4,
            generator: NetworkSpec::conv_encoder_decoder().with_width(2).with_depth(2),
            discriminator: NetworkSpec::att_discriminator().with_width(2).with_depth(2),
            ..Default::default()
        }
    }

    #[test]
    fn ga_runs_on_degenerate_split() {
        let t = synthetic_dataset(&SyntheticSpec::new(2, 2, 16, 0)).unwrap();
        let o = train_ga(&BlockShuffle::new(4, 0), &t, &tiny_ga(), None).unwrap();
        assert_eq!(o.history.len(), 1);
        let a = train_ga(&BlockShuffle::new(4, 0), &t, &tiny_ga(), None).unwrap();
        assert_eq!(o.g_att.checksum(), a.g_att.checksum());
    }

    #[test]
    fn evaluation_composes_and_reports() {
        let t = synthetic_dataset(&SyntheticSpec::new(2, 3, 16, 1)).unwrap();
        let g = ModelHandle::build(&NetworkSpec::conv_encoder_decoder().with_width(2).with_depth(2)).unwrap();
        let s = NegPosFlip { seed: 4 };
        let p = SsimParams::default();
        let r = evaluate_attack(&g, &s, &t, "ga", &p).unwrap();
        let enc = encrypt_dataset(&s, &t).unwrap();
        for (i, ((x, _), (e, _))) in t.items().iter().zip(enc.items()).enumerate() {
            let manual = ssim(x, &reconstruct(&g, e).unwrap(), &p).unwrap();
            assert_eq!(manual, r.per_image[i]);
        }
        let mean = r.per_image.iter().sum::<f64>() / 3.0;
        assert!((r.mean_ssim - mean).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let (json, csv_path) = r.write(dir.path()).unwrap();
        let back: AttackReport = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(std::fs::read_to_string(csv_path).unwrap().lines().count(), 4);
        let empty = LabeledDataset::empty("e", 2).unwrap();
        assert!(evaluate_attack(&g, &s, &empty, "ga", &p).is_err());
    }

    #[test]
    fn paired_attack_refuses_keyless_and_empty() {
        let t = synthetic_dataset(&SyntheticSpec::new(2, 2, 8, 0)).unwrap();
        assert!(scheme_pairs(&IdentityScheme, &t).is_err());
        assert!(train_paired_attack(&[], &PairedConfig::default(), None).is_err());
    }

    #[test]
    fn paired_attack_follows_schedule() {
        let t = synthetic_dataset(&SyntheticSpec::new(2, 8, 8, 3)).unwrap();
        let pairs = scheme_pairs(&BlockShuffle::new(4, 1), &t).unwrap();
        let cfg = PairedConfig {
            epochs: 3,
            lr_drop_epochs: vec![1, 2],
            batch_size: 4,
            generator: NetworkSpec::conv_encoder_decoder().with_width(2).with_depth(1),
            ..Default::default()
        };
        let (_, h) = train_paired_attack(&pairs, &cfg, None).unwrap();
        let lrs: Vec<f64> = h.iter().map(|e| e.lr).collect();
        assert_eq!(lrs[0], 0.1);
        assert!((lrs[1] - 0.01).abs() < 1e-15 && (lrs[2] - 0.001).abs() < 1e-15);
    }
}
