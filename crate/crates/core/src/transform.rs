//! CycleGAN training of the transformation network `h_p = G_AB` on plain
//! images (domain A) and protected images (domain B), and its application.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::{pixels_to_signed, signed_to_pixels, stack_images, unstack_images, ImageTensor, ValueRange};
use crate::losses::{
    cross_entropy, feature_loss, lsgan_disc, lsgan_gen, scalar, squared_norm_loss, LossReport,
    LossWeights, NormReduction,
};
use crate::models::{config_hash, Checkpoint, CheckpointMeta, ModelHandle, ModelKind, NetworkSpec};
use crate::optim::Adam;
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleGanConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub reduction: NormReduction,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Capacity of the discriminator history pool (0: disabled).
    pub replay_pool: usize,
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
}

impl Default for CycleGanConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            weights: LossWeights::default(),
            reduction: NormReduction::Mean,
            seed: 0,
            checkpoint_every: 100,
            replay_pool: 0,
            generator: NetworkSpec::unet_generator(),
            discriminator: NetworkSpec::patch_discriminator(),
        }
    }
}

impl CycleGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("cyclegan epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid("cyclegan lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("cyclegan batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        if self.generator.kind() != ModelKind::Generator {
            return Err(Error::Invalid(format!("{} is not a generator", self.generator.arch)));
        }
        if self.discriminator.kind() != ModelKind::Discriminator {
            return Err(Error::Invalid(format!(
                "{} is not a discriminator",
                self.discriminator.arch
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// History of generated images shown to a discriminator.
#[derive(Debug, Default)]
struct ReplayPool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl ReplayPool {
    fn query(&mut self, fakes: &Tensor, rng: &mut StreamRng) -> Tensor {
        if self.capacity == 0 {
            return fakes.shallow_clone();
        }
        let n = fakes.size()[0];
        let mut out = Vec::with_capacity(n as usize);
        for i in 0..n {
            let img = fakes.get(i).detach().copy();
            if self.images.len() < self.capacity {
                self.images.push(img.copy());
                out.push(img);
            } else if rng.gen_bool(0.5) {
                let j = rng.gen_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[j], img));
            } else {
                out.push(img);
            }
        }
        Tensor::stack(&out, 0)
    }

    fn save(&self, ck: &mut Checkpoint, key: &str) {
        if !self.images.is_empty() {
            ck.insert_tensor(key, &Tensor::stack(&self.images, 0));
        }
    }

    fn load(&mut self, ck: &Checkpoint, key: &str) {
        self.images = match ck.tensors.get(key) {
            Some(t) => (0..t.size()[0]).map(|i| t.get(i).copy()).collect(),
            None => Vec::new(),
        };
    }
}

/// The four networks of a finished (or resumed) run.
#[derive(Debug)]
pub struct CycleGanNets {
    pub g_ab: ModelHandle,
    pub g_ba: ModelHandle,
    pub f_a: ModelHandle,
    pub f_b: ModelHandle,
}

#[derive(Debug)]
pub struct CycleGanOutcome {
    pub nets: CycleGanNets,
    pub reports: Vec<LossReport>,
    /// Last checkpoint written, if any.
    pub checkpoint: Option<PathBuf>,
}

fn frozen_copy(m: &ModelHandle) -> Result<ModelHandle> {
    let mut spec = m.spec().clone();
    if spec.weights.is_some() {
        spec.weights = Some(crate::models::Weights::Seeded);
    }
    let mut c = ModelHandle::build_with_kind(&spec, m.tensor_kind())?;
    c.copy_from(m)?;
    c.freeze();
    Ok(c)
}

fn dataset_tensors(d: &LabeledDataset) -> Result<(Tensor, Tensor)> {
    let xs = stack_images(d.images(), Kind::Float)?;
    let ys = Tensor::from_slice(&d.labels().iter().map(|l| *l as i64).collect::<Vec<_>>());
    Ok((xs, ys))
}

fn select(t: &Tensor, idx: &[usize]) -> Tensor {
    let idx = Tensor::from_slice(&idx.iter().map(|i| *i as i64).collect::<Vec<_>>());
    t.index_select(0, &idx)
}

/// Stateful trainer; one instance owns all four networks.
pub struct CycleGanTrainer<'a> {
    cfg: CycleGanConfig,
    hash: String,
    x: Tensor,
    y: Tensor,
    p: Tensor,
    yp: Tensor,
    h: ModelHandle,
    phi: &'a ModelHandle,
    nets: CycleGanNets,
    opt_g: Adam,
    opt_d: Adam,
    pool_a: ReplayPool,
    pool_b: ReplayPool,
    epoch: usize,
    step: usize,
    out: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    last_checkpoint: Option<PathBuf>,
}

fn prefixed(m: &ModelHandle, prefix: &str) -> Vec<(String, Tensor)> {
    m.trainable()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

impl<'a> CycleGanTrainer<'a> {
    /// Sets up a fresh run. `plain` and `protected` must have equal sizes;
    /// `out` receives checkpoints and `losses.jsonl`.
    pub fn new(
        plain: &LabeledDataset,
        protected: &LabeledDataset,
        h_theta: &ModelHandle,
        phi: &'a ModelHandle,
        cfg: &CycleGanConfig,
        out: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        if plain.len() != protected.len() {
            return Err(Error::Invalid(format!(
                "plain and protected sets differ in size ({} vs {})",
                plain.len(),
                protected.len()
            )));
        }
        if plain.is_empty() {
            return Err(Error::Empty("cyclegan training set"));
        }
        if plain.image_shape() != protected.image_shape() {
            return Err(Error::shape(
                format!("{:?}", plain.image_shape()),
                format!("{:?}", protected.image_shape()),
            ));
        }
        h_theta.expect_kind(ModelKind::Classifier)?;
        phi.expect_kind(ModelKind::FeatureExtractor)?;
        let stream = SeedStream::new(cfg.seed);
        let build = |spec: &NetworkSpec, name: &str| {
            ModelHandle::build(&spec.clone().with_seed(stream.derive(name, 0)))
        };
        let nets = CycleGanNets {
            g_ab: build(&cfg.generator, "g_ab")?,
            g_ba: build(&cfg.generator, "g_ba")?,
            f_a: build(&cfg.discriminator, "f_a")?,
            f_b: build(&cfg.discriminator, "f_b")?,
        };
        let mut gp = prefixed(&nets.g_ab, "g_ab");
        gp.extend(prefixed(&nets.g_ba, "g_ba"));
        let mut dp = prefixed(&nets.f_a, "f_a");
        dp.extend(prefixed(&nets.f_b, "f_b"));
        let (x, y) = dataset_tensors(plain)?;
        let (p, yp) = dataset_tensors(protected)?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            hash: cfg.hash()?,
            opt_g: Adam::new(gp, cfg.lr, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(dp, cfg.lr, cfg.beta1, cfg.beta2),
            pool_a: ReplayPool {
                capacity: cfg.replay_pool,
                images: Vec::new(),
            },
            pool_b: ReplayPool {
                capacity: cfg.replay_pool,
                images: Vec::new(),
            },
            cfg: cfg.clone(),
            x,
            y,
            p,
            yp,
            h: frozen_copy(h_theta)?,
            phi,
            nets,
            epoch: 0,
            step: 0,
            out: out.map(Path::to_path_buf),
            log: None,
            last_checkpoint: None,
        })
    }

    /// Continues a run from a checkpoint written by [`Self::save_checkpoint`].
    /// A configuration hash mismatch is logged, not fatal.
    pub fn resume(
        checkpoint: &Path,
        plain: &LabeledDataset,
        protected: &LabeledDataset,
        h_theta: &ModelHandle,
        phi: &'a ModelHandle,
        cfg: &CycleGanConfig,
        out: Option<&Path>,
    ) -> Result<Self> {
        let mut t = Self::new(plain, protected, h_theta, phi, cfg, out)?;
        let ck = Checkpoint::load(checkpoint)?;
        ck.check_config(&t.hash)?;
        let meta = ck.header()?;
        ck.restore_model("g_ab", &mut t.nets.g_ab)?;
        ck.restore_model("g_ba", &mut t.nets.g_ba)?;
        ck.restore_model("f_a", &mut t.nets.f_a)?;
        ck.restore_model("f_b", &mut t.nets.f_b)?;
        t.opt_g.load_state(&ck, "opt_g")?;
        t.opt_d.load_state(&ck, "opt_d")?;
        t.pool_a.load(&ck, "pool_a");
        t.pool_b.load(&ck, "pool_b");
        t.epoch = meta.epoch;
        t.step = ck
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing step counter".into()))?;
        t.last_checkpoint = Some(checkpoint.to_path_buf());
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn nets(&self) -> &CycleGanNets {
        &self.nets
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.x.size()[0] as usize).div_ceil(self.cfg.batch_size)
    }

    fn generator(g: &ModelHandle, pixels: &Tensor) -> Result<Tensor> {
        Ok(signed_to_pixels(&g.forward(&pixels_to_signed(pixels))?))
    }

    /// Discriminator half-step. Fakes are detached, so generator parameters
    /// receive no gradient.
    fn discriminator_step(&mut self, xa: &Tensor, xb: &Tensor, rng: &mut StreamRng) -> Result<f64> {
        let (fake_a, fake_b) = tch::no_grad(|| -> Result<(Tensor, Tensor)> {
            Ok((
                self.nets.g_ba.forward(&pixels_to_signed(xb))?,
                self.nets.g_ab.forward(&pixels_to_signed(xa))?,
            ))
        })?;
        let fake_a = self.pool_a.query(&fake_a, rng);
        let fake_b = self.pool_b.query(&fake_b, rng);
        self.opt_d.zero_grad();
        let d_a = lsgan_disc(
            &self.nets.f_a.discriminator_scores(&pixels_to_signed(xa))?,
            &self.nets.f_a.discriminator_scores(&fake_a)?,
        )?;
        let d_b = lsgan_disc(
            &self.nets.f_b.discriminator_scores(&pixels_to_signed(xb))?,
            &self.nets.f_b.discriminator_scores(&fake_b)?,
        )?;
        let loss = d_a + d_b;
        let v = scalar(&loss);
        if !v.is_finite() {
            return Err(self.non_finite("discriminator", v));
        }
        loss.backward();
        self.opt_d.step();
        Ok(v)
    }

    /// Generator half-step on the full objective. Returns the unweighted
    /// parts `(l_ad_A, l_ad_B, l_p, l_c, l_r)`.
    fn generator_step(
        &mut self,
        xa: &Tensor,
        ya: &Tensor,
        xb: &Tensor,
        yb: &Tensor,
    ) -> Result<[f64; 5]> {
        let w = self.cfg.weights;
        self.opt_g.zero_grad();
        let fake_b = Self::generator(&self.nets.g_ab, xa)?;
        let fake_a = Self::generator(&self.nets.g_ba, xb)?;
        let l_ad_a = lsgan_gen(&self.nets.f_a.discriminator_scores(&pixels_to_signed(&fake_a))?)?;
        let l_ad_b = lsgan_gen(&self.nets.f_b.discriminator_scores(&pixels_to_signed(&fake_b))?)?;
        let phi = |t: &Tensor| self.phi.extract_features(t);
        let l_p = feature_loss(&phi, xa, &fake_b)? + feature_loss(&phi, xa, &fake_a)?;
        let l_c = cross_entropy(&self.h.classify_pixels(&fake_b)?, ya)?
            + cross_entropy(&self.h.classify_pixels(&fake_a)?, yb)?;
        let rec_a = Self::generator(&self.nets.g_ba, &fake_b)?;
        let rec_b = Self::generator(&self.nets.g_ab, &fake_a)?;
        let l_r = squared_norm_loss(&rec_a, xa, self.cfg.reduction)?
            + squared_norm_loss(&rec_b, xb, self.cfg.reduction)?;
        let total = (&l_ad_a + &l_ad_b) * w.lambda
            + &l_p * w.gamma1
            + &l_c * w.gamma2
            + &l_r * w.gamma3;
        let v = scalar(&total);
        if !v.is_finite() {
            return Err(self.non_finite("generator", v));
        }
        total.backward();
        self.opt_g.step();
        Ok([
            scalar(&l_ad_a),
            scalar(&l_ad_b),
            scalar(&l_p),
            scalar(&l_c),
            scalar(&l_r),
        ])
    }

    fn non_finite(&self, which: &str, v: f64) -> Error {
        let last = self
            .last_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".into());
        Error::NonFinite(format!(
            "{which} loss {v} at epoch {}, step {}; last good checkpoint: {last}",
            self.epoch, self.step
        ))
    }

    /// One pass over the data: independent shuffles of both domains, then
    /// discriminators and generators in turn for every batch.
    pub fn run_epoch(&mut self) -> Result<Vec<LossReport>> {
        let stream = SeedStream::new(self.cfg.seed);
        let mut rng = stream.rng("cyclegan-epoch", self.epoch as u64);
        let n = self.x.size()[0] as usize;
        let mut ia: Vec<usize> = (0..n).collect();
        let mut ib: Vec<usize> = (0..n).collect();
        ia.shuffle(&mut rng);
        ib.shuffle(&mut rng);
        let bs = self.cfg.batch_size;
        let mut reports = Vec::with_capacity(self.steps_per_epoch());
        for (ca, cb) in ia.chunks(bs).zip(ib.chunks(bs)) {
            let (xa, ya) = (select(&self.x, ca), select(&self.y, ca));
            let (xb, yb) = (select(&self.p, cb), select(&self.yp, cb));
            let l_disc = self.discriminator_step(&xa, &xb, &mut rng)?;
            let [ad_a, ad_b, lp, lc, lr] = self.generator_step(&xa, &ya, &xb, &yb)?;
            let r = LossReport::compose(
                self.step,
                self.epoch,
                ad_a,
                ad_b,
                lp,
                lc,
                lr,
                l_disc,
                &self.cfg.weights,
            );
            self.write_report(&r)?;
            reports.push(r);
            self.step += 1;
        }
        self.epoch += 1;
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io("losses.jsonl", e))?;
        }
        Ok(reports)
    }

    fn write_report(&mut self, r: &LossReport) -> Result<()> {
        let Some(dir) = &self.out else {
            return Ok(());
        };
        if self.log.is_none() {
            let path = dir.join("losses.jsonl");
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            self.log = Some(BufWriter::new(f));
        }
        let log = self.log.as_mut().expect("log opened above");
        serde_json::to_writer(&mut *log, r)?;
        log.write_all(b"\n").map_err(|e| Error::io("losses.jsonl", e))
    }

    /// Everything needed to continue the run exactly.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(&CheckpointMeta {
            config_hash: self.hash.clone(),
            epoch: self.epoch,
        });
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        ck.insert_model("g_ab", &self.nets.g_ab)?;
        ck.insert_model("g_ba", &self.nets.g_ba)?;
        ck.insert_model("f_a", &self.nets.f_a)?;
        ck.insert_model("f_b", &self.nets.f_b)?;
        self.opt_g.save_state(&mut ck, "opt_g");
        self.opt_d.save_state(&mut ck, "opt_d");
        self.pool_a.save(&mut ck, "pool_a");
        self.pool_b.save(&mut ck, "pool_b");
        Ok(ck)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Trains until `cfg.epochs`, checkpointing on schedule when an output
    /// directory was given.
    pub fn train(mut self) -> Result<CycleGanOutcome> {
        let mut reports = Vec::new();
        while self.epoch < self.cfg.epochs {
            reports.extend(self.run_epoch()?);
            let every = self.cfg.checkpoint_every;
            let due = self.epoch == self.cfg.epochs || (every > 0 && self.epoch % every == 0);
            if let (true, Some(dir)) = (due, self.out.clone()) {
                let path = dir.join(format!("ckpt-{:05}.safetensors", self.epoch));
                self.save_checkpoint(&path)?;
                self.save_checkpoint(&dir.join("latest.safetensors"))?;
            }
            log::info!(
                "cyclegan epoch {}/{}: l_gan {:.5}",
                self.epoch,
                self.cfg.epochs,
                reports.last().map(|r| r.l_gan).unwrap_or(f64::NAN)
            );
        }
        Ok(CycleGanOutcome {
            nets: self.nets,
            reports,
            checkpoint: self.last_checkpoint,
        })
    }
}

/// Trains a fresh CycleGAN on `(plain, protected)`.
pub fn train_cyclegan(
    plain: &LabeledDataset,
    protected: &LabeledDataset,
    h_theta: &ModelHandle,
    phi: &ModelHandle,
    cfg: &CycleGanConfig,
    out: Option<&Path>,
) -> Result<CycleGanOutcome> {
    CycleGanTrainer::new(plain, protected, h_theta, phi, cfg, out)?.train()
}

/// Loads the four networks of a checkpoint written by the trainer.
pub fn load_cyclegan(path: &Path) -> Result<CycleGanNets> {
    let ck = Checkpoint::load(path)?;
    Ok(CycleGanNets {
        g_ab: ck.load_model("g_ab")?,
        g_ba: ck.load_model("g_ba")?,
        f_a: ck.load_model("f_a")?,
        f_b: ck.load_model("f_b")?,
    })
}

/// Loads `h_p` (the `g_ab` generator) from a trainer checkpoint.
pub fn load_transform(path: &Path) -> Result<ModelHandle> {
    let g = Checkpoint::load(path)?.load_model("g_ab")?;
    g.expect_kind(ModelKind::Generator)?;
    Ok(g)
}

/// Applies `h_p` to a `[0,1]` batch, returning `[0,1]` pixels.
pub fn transform_tensor(g_ab: &ModelHandle, pixels: &Tensor) -> Result<Tensor> {
    g_ab.expect_kind(ModelKind::Generator)?;
    tch::no_grad(|| Ok(signed_to_pixels(&g_ab.forward_eval(&pixels_to_signed(pixels))?)))
}

pub fn transform(g_ab: &ModelHandle, x: &ImageTensor) -> Result<ImageTensor> {
    let pixels = x.remap(ValueRange::UNIT).to_tensor(Kind::Float);
    ImageTensor::from_tensor(&transform_tensor(g_ab, &pixels)?, ValueRange::UNIT)
}

/// Transforms a whole dataset in batches; labels and order are kept.
pub fn transform_dataset(g_ab: &ModelHandle, d: &LabeledDataset, batch: usize) -> Result<LabeledDataset> {
    let mut items = Vec::with_capacity(d.len());
    for chunk in d.items().chunks(batch.max(1)) {
        let xs = stack_images(chunk.iter().map(|(i, _)| i), Kind::Float)?;
        let out = transform_tensor(g_ab, &xs)?;
        for (img, (_, l)) in unstack_images(&out, ValueRange::UNIT)?.into_iter().zip(chunk) {
            items.push((img, *l));
        }
    }
    LabeledDataset::new(format!("{}-transformed", d.name()), d.num_classes(), items)
}
