//! Network specifications and the [`ModelHandle`] wrapping a built network
//! together with its parameters.

mod checkpoint;
mod nets;

pub use checkpoint::{
    config_hash, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn, Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::image::Normalization;
use crate::rng::SeedStream;
use nets::{AttDiscriminator, EncoderDecoder, FeatureNet, PatchDiscriminator, ResNet, Unet, Vgg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Vgg13Bn,
    Resnet18,
    UnetGenerator,
    ConvEncoderDecoder,
    PatchDiscriminator,
    AttDiscriminator,
    Vgg16Features,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Vgg13Bn,
        Architecture::Resnet18,
        Architecture::UnetGenerator,
        Architecture::ConvEncoderDecoder,
        Architecture::PatchDiscriminator,
        Architecture::AttDiscriminator,
        Architecture::Vgg16Features,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Architecture::Vgg13Bn => "vgg13_bn",
            Architecture::Resnet18 => "resnet18",
            Architecture::UnetGenerator => "unet_generator",
            Architecture::ConvEncoderDecoder => "conv_encoder_decoder",
            Architecture::PatchDiscriminator => "patch_discriminator",
            Architecture::AttDiscriminator => "att_discriminator",
            Architecture::Vgg16Features => "vgg16_features",
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Vgg13Bn | Architecture::Resnet18 => ModelKind::Classifier,
            Architecture::UnetGenerator | Architecture::ConvEncoderDecoder => ModelKind::Generator,
            Architecture::PatchDiscriminator | Architecture::AttDiscriminator => {
                ModelKind::Discriminator
            }
            Architecture::Vgg16Features => ModelKind::FeatureExtractor,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Generator,
    Discriminator,
    FeatureExtractor,
}

/// Where initial parameters come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    /// Deterministic random initialization from the spec seed.
    Seeded,
    /// Parameters read from a safetensors file.
    File(PathBuf),
}

/// Everything needed to rebuild a network bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// Output classes (classifiers only).
    pub num_classes: usize,
    /// Channel width of the first stage; the reference networks use 64.
    pub base_width: usize,
    /// Generators: number of down/up-sampling levels. Discriminators: number
    /// of strided stages.
    pub depth: usize,
    /// Generators: identity-initialized global skip connection.
    pub residual: bool,
    pub seed: u64,
    /// `None` means seeded init, except for the feature extractor, which has
    /// no silent random default.
    pub weights: Option<Weights>,
}

impl NetworkSpec {
    fn base(arch: Architecture) -> Self {
        Self {
            arch,
            num_classes: 0,
            base_width: 64,
            depth: 0,
            residual: false,
            seed: 0,
            weights: None,
        }
    }

    pub fn vgg13_bn(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::base(Architecture::Vgg13Bn)
        }
    }

    pub fn resnet18(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::base(Architecture::Resnet18)
        }
    }

    pub fn unet_generator() -> Self {
        Self {
            depth: 4,
            ..Self::base(Architecture::UnetGenerator)
        }
    }

    pub fn conv_encoder_decoder() -> Self {
        Self {
            depth: 3,
            residual: true,
            ..Self::base(Architecture::ConvEncoderDecoder)
        }
    }

    pub fn patch_discriminator() -> Self {
        Self {
            depth: 3,
            ..Self::base(Architecture::PatchDiscriminator)
        }
    }

    pub fn att_discriminator() -> Self {
        Self {
            depth: 4,
            ..Self::base(Architecture::AttDiscriminator)
        }
    }

    /// VGG16 truncated after its second ReLU; weights must come from `path`.
    pub fn vgg16_features(path: impl Into<PathBuf>) -> Self {
        Self {
            weights: Some(Weights::File(path.into())),
            ..Self::base(Architecture::Vgg16Features)
        }
    }

    /// Same layer plan with explicitly requested random weights.
    pub fn vgg16_features_seeded(width: usize, seed: u64) -> Self {
        Self {
            base_width: width,
            seed,
            weights: Some(Weights::Seeded),
            ..Self::base(Architecture::Vgg16Features)
        }
    }

    pub fn with_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    pub fn with_depth(mut self, d: usize) -> Self {
        self.depth = d;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_residual(mut self, r: bool) -> Self {
        self.residual = r;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Invalid("base_width must be positive".into()));
        }
        match self.arch.kind() {
            ModelKind::Classifier if self.num_classes < 2 => Err(Error::Invalid(
                "classifiers need at least two classes".into(),
            )),
            ModelKind::Generator | ModelKind::Discriminator if self.depth == 0 => {
                Err(Error::Invalid(format!("{} needs depth >= 1", self.arch)))
            }
            _ => Ok(()),
        }
    }

    /// Checks that `[C, H, W]` is an acceptable input.
    pub fn check_input(&self, shape: &[i64]) -> Result<()> {
        let err = |why: String| Error::shape(format!("{} input: {why}", self.arch), format!("{shape:?}"));
        if shape.len() != 4 {
            return Err(err("N×C×H×W batch".into()));
        }
        if shape[1] != 3 {
            return Err(err("3 channels".into()));
        }
        let (h, w) = (shape[2] as usize, shape[3] as usize);
        match self.arch {
            Architecture::UnetGenerator | Architecture::ConvEncoderDecoder => {
                let m = 1usize << self.depth;
                if h % m != 0 || w % m != 0 {
                    return Err(err(format!("spatial size divisible by {m}")));
                }
            }
            Architecture::PatchDiscriminator => {
                let m = PatchDiscriminator::min_side(self.depth);
                if h < m || w < m {
                    return Err(err(format!("spatial size >= {m}")));
                }
            }
            Architecture::AttDiscriminator => {
                let m = 1usize << self.depth;
                if h < m || w < m {
                    return Err(err(format!("spatial size >= {m}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

enum Network {
    Vgg(Vgg),
    ResNet(ResNet),
    Unet(Unet),
    EncDec(EncoderDecoder),
    Patch(PatchDiscriminator),
    Att(AttDiscriminator),
    Features(FeatureNet),
}

/// A built network: spec, parameters, and mode.
pub struct ModelHandle {
    spec: NetworkSpec,
    vs: nn::VarStore,
    net: Network,
    train: bool,
    trainable: Vec<String>,
    /// Normalization a classifier applies to `[0,1]` pixels; identity for
    /// other kinds.
    input_norm: Normalization,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("arch", &self.spec.arch)
            .field("parameters", &self.parameter_count())
            .field("train", &self.train)
            .finish()
    }
}

impl ModelHandle {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        Self::build_with_kind(spec, Kind::Float)
    }

    pub fn build_with_kind(spec: &NetworkSpec, kind: Kind) -> Result<Self> {
        spec.validate()?;
        if spec.arch == Architecture::Vgg16Features && spec.weights.is_none() {
            return Err(Error::Invalid(
                "vgg16_features needs a pretrained weights file (or explicitly seeded weights)"
                    .into(),
            ));
        }
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let w = spec.base_width as i64;
        let c = spec.num_classes as i64;
        let net = match spec.arch {
            Architecture::Vgg13Bn => Network::Vgg(Vgg::new(root, w, c)),
            Architecture::Resnet18 => Network::ResNet(ResNet::new(root, w, c)),
            Architecture::UnetGenerator => {
                Network::Unet(Unet::new(root, w, spec.depth, spec.residual))
            }
            Architecture::ConvEncoderDecoder => {
                Network::EncDec(EncoderDecoder::new(root, w, spec.depth, spec.residual))
            }
            Architecture::PatchDiscriminator => {
                Network::Patch(PatchDiscriminator::new(root, w, spec.depth))
            }
            Architecture::AttDiscriminator => {
                Network::Att(AttDiscriminator::new(root, w, spec.depth))
            }
            Architecture::Vgg16Features => Network::Features(FeatureNet::new(root, w)),
        };
        let mut trainable: Vec<String> = vs
            .variables()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect();
        trainable.sort();
        let mut handle = Self {
            spec: spec.clone(),
            vs,
            net,
            train: false,
            trainable,
            input_norm: Normalization::identity(3),
        };
        handle.initialize()?;
        if kind != Kind::Float {
            handle.vs.set_kind(kind);
        }
        if let Some(Weights::File(path)) = &spec.weights {
            handle.load_weights_file(path)?;
        }
        if spec.arch == Architecture::Vgg16Features {
            handle.freeze();
        }
        Ok(handle)
    }

    /// Deterministic initialization from the spec seed, independent of the
    /// global torch generator.
    fn initialize(&mut self) -> Result<()> {
        let stream = SeedStream::new(self.spec.seed);
        let gan_style = matches!(
            self.spec.kind(),
            ModelKind::Generator | ModelKind::Discriminator
        );
        let vars: BTreeMap<String, Tensor> = self.vs.variables().into_iter().collect();
        for (i, (name, var)) in vars.iter().enumerate() {
            let dims = var.size();
            let numel: i64 = dims.iter().product();
            let mut rng = stream.rng(name, i as u64);
            let values: Vec<f32> = if name.ends_with("running_var") {
                vec![1.0; numel as usize]
            } else if name.ends_with("running_mean") || name.ends_with(".bias") {
                vec![0.0; numel as usize]
            } else if name.contains(nets::RESIDUAL_HEAD) {
                vec![0.0; numel as usize]
            } else if dims.len() == 1 {
                // Norm-layer scale.
                vec![1.0; numel as usize]
            } else {
                let std = if gan_style {
                    0.02
                } else if dims.len() == 2 {
                    0.01
                } else {
                    // Kaiming normal over fan-in for ReLU networks.
                    let fan_in: i64 = dims[1..].iter().product();
                    (2.0 / fan_in as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            let t = Tensor::from_slice(&values).view(dims.as_slice());
            tch::no_grad(|| var.shallow_clone().copy_(&t));
            let _ = rng.gen::<u8>();
        }
        Ok(())
    }

    fn load_weights_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        for (name, var) in self.vs.variables() {
            let view = st
                .tensor(&name)
                .map_err(|_| Error::Checkpoint(format!("{}: missing tensor `{name}`", path.display())))?;
            let t = checkpoint::tensor_from_view(&view)?;
            if t.size() != var.size() {
                return Err(Error::shape(
                    format!("{name} {:?}", var.size()),
                    format!("{:?}", t.size()),
                ));
            }
            tch::no_grad(|| var.shallow_clone().copy_(&t.to_kind(var.kind())));
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn model_kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn tensor_kind(&self) -> Kind {
        self.vs.kind()
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn input_norm(&self) -> &Normalization {
        &self.input_norm
    }

    pub fn set_input_norm(&mut self, n: Normalization) -> Result<()> {
        n.validate()?;
        self.input_norm = n;
        Ok(())
    }

    /// Stops gradient flow into the parameters.
    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    pub fn unfreeze(&mut self) {
        if self.spec.arch != Architecture::Vgg16Features {
            self.vs.unfreeze();
        }
    }

    /// All parameters and buffers, sorted by name.
    pub fn variables(&self) -> BTreeMap<String, Tensor> {
        self.vs.variables().into_iter().collect()
    }

    /// Parameters updated by optimizers, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let vars = self.vs.variables();
        self.trainable
            .iter()
            .map(|n| (n.clone(), vars[n].shallow_clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        let vars = self.vs.variables();
        self.trainable
            .iter()
            .map(|n| vars[n].numel())
            .sum()
    }

    /// SHA-256 over every variable's name and raw bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.variables() {
            h.update(name.as_bytes());
            h.update(checkpoint::tensor_bytes(&t));
        }
        hex::encode(h.finalize())
    }

    /// Forward pass in the handle's current mode.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.forward_t(xs, self.train)
    }

    /// Forward pass in eval mode regardless of the handle's mode.
    pub fn forward_eval(&self, xs: &Tensor) -> Result<Tensor> {
        self.forward_t(xs, false)
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.spec.check_input(&xs.size())?;
        let xs = if xs.kind() != self.vs.kind() {
            xs.to_kind(self.vs.kind())
        } else {
            xs.shallow_clone()
        };
        Ok(match &self.net {
            Network::Vgg(n) => n.forward_t(&xs, train),
            Network::ResNet(n) => n.forward_t(&xs, train),
            Network::Unet(n) => n.forward(&xs),
            Network::EncDec(n) => n.forward(&xs),
            Network::Patch(n) => n.forward(&xs),
            Network::Att(n) => n.forward_t(&xs, train),
            Network::Features(n) => n.forward(&xs),
        })
    }

    /// Classifier logits for `[0,1]` pixels: applies the stored input
    /// normalization first. Always eval mode.
    pub fn classify_pixels(&self, pixels: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::Classifier)?;
        self.forward_eval(&self.input_norm.apply(pixels))
    }

    /// Feature map after the second ReLU, `N×C_k×H×W`.
    pub fn extract_features(&self, pixels: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::FeatureExtractor)?;
        self.forward_eval(pixels)
    }

    /// One score per image (patch maps are averaged).
    pub fn discriminator_scores(&self, xs: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::Discriminator)?;
        let out = self.forward(xs)?;
        Ok(if out.dim() == 4 {
            out.mean_dim(&[1i64, 2, 3][..], false, out.kind())
        } else {
            out
        })
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind() != kind {
            return Err(Error::Invalid(format!(
                "expected a {kind:?} network, got {}",
                self.spec.arch
            )));
        }
        Ok(())
    }

    /// Copies every variable from `other`, which must share the spec.
    pub fn copy_from(&mut self, other: &ModelHandle) -> Result<()> {
        if other.spec.arch != self.spec.arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: {} vs {}",
                self.spec.arch, other.spec.arch
            )));
        }
        self.vs.copy(&other.vs)?;
        self.input_norm = other.input_norm.clone();
        Ok(())
    }

    pub(crate) fn load_variables(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vs.variables() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.size() != var.size() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.size(),
                    var.size()
                )));
            }
            tch::no_grad(|| var.shallow_clone().copy_(&t.to_kind(var.kind())));
        }
        Ok(())
    }
}

/// Identity "generator", handy for tests and baselines.
pub fn identity_map(xs: &Tensor) -> Tensor {
    xs.shallow_clone()
}
