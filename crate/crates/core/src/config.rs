//! Experiment configuration files.
//!
//! One `key = value` pair per line, with dotted section prefixes such as
//! `cyclegan.lr = 0.0002`. Blank lines and lines starting with `#` are
//! ignored; trailing `# ...` comments are stripped. The full key list lives
//! in `docs/config.md` and in [`KEYS`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{GaConfig, PairedConfig};
use crate::classify::ClassifyConfig;
use crate::data::synth::{synthetic_dataset, SyntheticSpec};
use crate::data::{
    load_cifar10, load_cifar100, load_dataset_dir, load_stl10, AugmentSpec, LabeledDataset, Split,
};
use crate::error::{Error, Result};
use crate::losses::NormReduction;
use crate::metrics::SsimParams;
use crate::models::{Architecture, NetworkSpec};
use crate::protect::PerturbationSpec;
use crate::rng::SeedStream;
use crate::transform::CycleGanConfig;

/// Relative dataset directories are resolved against this variable when set.
pub const DATA_ROOT_ENV: &str = "GANPROTECT_DATA";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("pipeline", "protect | train-transform | transform | attack | classify | metrics | chain"),
    ("seed", "global seed; every module seed is derived from it"),
    ("out", "output directory"),
    ("results", "results CSV to append metric rows to"),
    ("run_id", "identifier written to the results CSV"),
    ("data.train", "training dataset source"),
    ("data.test", "test dataset source"),
    ("data.protected", "protected counterpart of data.train"),
    ("protect.model", "classifier checkpoint used as h_theta"),
    ("protect.arch", "h_theta architecture when the chain trains it"),
    ("protect.width", "h_theta base width when the chain trains it"),
    ("protect.eps", "L-infinity budget"),
    ("protect.alpha", "step size (default eps/10)"),
    ("protect.iters", "descent iterations"),
    ("protect.batch_size", "images per descent batch"),
    ("cyclegan.epochs", "training epochs"),
    ("cyclegan.lr", "Adam learning rate"),
    ("cyclegan.beta1", "Adam beta1"),
    ("cyclegan.beta2", "Adam beta2"),
    ("cyclegan.batch_size", "images per step"),
    ("cyclegan.lambda", "adversarial weight"),
    ("cyclegan.gamma1", "perceptual weight"),
    ("cyclegan.gamma2", "classification weight"),
    ("cyclegan.gamma3", "reconstruction weight"),
    ("cyclegan.reduction", "mean | sum"),
    ("cyclegan.checkpoint_every", "epochs between checkpoints"),
    ("cyclegan.replay_pool", "fake-image replay pool size (0 disables)"),
    ("cyclegan.generator.width", "generator base width"),
    ("cyclegan.generator.depth", "generator depth"),
    ("cyclegan.discriminator.width", "discriminator base width"),
    ("cyclegan.discriminator.depth", "discriminator depth"),
    ("cyclegan.classifier", "h_theta checkpoint"),
    ("cyclegan.features", "feature extractor: safetensors path or seeded:<width>"),
    ("cyclegan.resume", "trainer checkpoint to resume from"),
    ("transform.model", "trainer checkpoint holding h_p"),
    ("transform.batch_size", "images per forward pass"),
    ("attack.kind", "ga | paired"),
    ("attack.scheme", "identity | block_shuffle | negpos_flip | <h_p checkpoint>"),
    ("attack.epochs", "training epochs"),
    ("attack.lr", "learning rate"),
    ("attack.batch_size", "images per step"),
    ("attack.lr_drops", "paired attack: comma-separated drop epochs"),
    ("attack.lr_drop_factor", "paired attack: divisor applied at each drop"),
    ("attack.generator", "conv_encoder_decoder | unet_generator"),
    ("attack.generator.width", "attack generator base width"),
    ("attack.generator.depth", "attack generator depth"),
    ("attack.discriminator.width", "GA discriminator base width"),
    ("attack.discriminator.depth", "GA discriminator depth"),
    ("classify.mode", "train | eval"),
    ("classify.arch", "resnet18 | vgg13_bn"),
    ("classify.width", "classifier base width"),
    ("classify.epochs", "training epochs"),
    ("classify.lr", "initial SGD learning rate"),
    ("classify.lr_drops", "comma-separated drop epochs"),
    ("classify.lr_drop_factor", "divisor applied at each drop"),
    ("classify.weight_decay", "SGD weight decay"),
    ("classify.momentum", "SGD momentum"),
    ("classify.batch_size", "images per step"),
    ("classify.augment", "cifar | none"),
    ("classify.transform", "trainer checkpoint holding h_p, or none"),
    ("classify.model", "classifier checkpoint (eval mode)"),
    ("metrics.reference", "reference dataset source"),
    ("metrics.test", "dataset source compared against the reference"),
    ("metrics.luminance_only", "compare BT.601 luma instead of RGB"),
    ("metrics.window", "Gaussian window size"),
];

/// One problem found in a configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, key: &str, message: impl Into<String>) -> Self {
        Self {
            line,
            key: Some(key.to_string()),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

fn combine(errors: &[ConfigError]) -> Error {
    let lines: Vec<String> = errors.iter().map(ToString::to_string).collect();
    Error::Config(lines.join("; "))
}

/// Untyped `key = value` pairs with the line each came from. Overrides set
/// programmatically carry no line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (Option<usize>, String)>,
}

impl RawConfig {
    /// Parses text, reporting syntax problems and unknown keys.
    pub fn parse(text: &str) -> std::result::Result<RawConfig, Vec<ConfigError>> {
        let (raw, errors) = RawConfig::parse_lenient(text);
        if errors.is_empty() {
            Ok(raw)
        } else {
            Err(errors)
        }
    }

    /// Every well-formed entry plus the problems with the rest.
    fn parse_lenient(text: &str) -> (RawConfig, Vec<ConfigError>) {
        let mut raw = RawConfig::default();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = Some(i + 1);
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                errors.push(ConfigError {
                    line: n,
                    key: None,
                    message: format!("expected `key = value`, got `{body}`"),
                });
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !is_known(k) {
                errors.push(ConfigError::at(n, k, "unknown key"));
            } else if v.is_empty() {
                errors.push(ConfigError::at(n, k, "missing value"));
            } else if let Some((first, _)) = raw.entries.get(k) {
                let first = first.map_or(String::new(), |l| format!(" (first set on line {l})"));
                errors.push(ConfigError::at(n, k, format!("duplicate key{first}")));
            } else {
                raw.entries.insert(k.to_string(), (n, v.to_string()));
            }
        }
        if raw.entries.is_empty() && errors.is_empty() {
            errors.push(ConfigError {
                line: None,
                key: None,
                message: "configuration is empty".into(),
            });
        }
        (raw, errors)
    }

    pub fn from_file(path: &Path) -> std::result::Result<RawConfig, Vec<ConfigError>> {
        match std::fs::read_to_string(path) {
            Ok(text) => RawConfig::parse(&text),
            Err(e) => Err(vec![ConfigError {
                line: None,
                key: None,
                message: format!("cannot read {}: {e}", path.display()),
            }]),
        }
    }

    /// Sets or replaces a key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), (None, value.into()));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }

    /// Canonical text: keys sorted, one per line.
    pub fn to_text(&self) -> String {
        self.entries().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).and_then(|(l, _)| *l)
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Protect,
    TrainTransform,
    Transform,
    Attack,
    Classify,
    Metrics,
    /// protect → train-transform → transform → classify → metrics.
    Chain,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::Protect,
        Pipeline::TrainTransform,
        Pipeline::Transform,
        Pipeline::Attack,
        Pipeline::Classify,
        Pipeline::Metrics,
        Pipeline::Chain,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Pipeline::Protect => "protect",
            Pipeline::TrainTransform => "train-transform",
            Pipeline::Transform => "transform",
            Pipeline::Attack => "attack",
            Pipeline::Classify => "classify",
            Pipeline::Metrics => "metrics",
            Pipeline::Chain => "chain",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{s}`")))
    }
}

/// Where a dataset comes from.
///
/// ```text
/// cifar10:<split>:<dir>      cifar100:<split>:<dir>      stl10:<split>:<dir>
/// store:<dir>                synthetic:<classes>:<count>:<side>[:<seed>]
/// ```
///
/// Any source may be followed by `;classes=a,b,...`, `;limit=n` and
/// `;downscale=f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub kind: SourceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downscale: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "format")]
pub enum SourceKind {
    Cifar10 { split: Split, dir: PathBuf },
    Cifar100 { split: Split, dir: PathBuf },
    Stl10 { split: Split, dir: PathBuf },
    Store { dir: PathBuf },
    Synthetic {
        classes: usize,
        count: usize,
        side: usize,
        seed: Option<u64>,
    },
}

fn resolve_dir(s: &str) -> PathBuf {
    let p = PathBuf::from(s);
    if p.is_relative() {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            return PathBuf::from(root).join(p);
        }
    }
    p
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{s}` is not a valid {what}")))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_num(p, "list entry")).collect()
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        let head = parts.next().unwrap_or("").trim();
        let (format, rest) = head
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dataset source `{head}` lacks a format prefix")))?;
        let split_dir = |rest: &str| -> Result<(Split, PathBuf)> {
            let (split, dir) = rest
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected `{format}:<split>:<dir>`")))?;
            Ok((split.parse()?, resolve_dir(dir)))
        };
        let kind = match format {
            "cifar10" => split_dir(rest).map(|(split, dir)| SourceKind::Cifar10 { split, dir })?,
            "cifar100" => split_dir(rest).map(|(split, dir)| SourceKind::Cifar100 { split, dir })?,
            "stl10" => split_dir(rest).map(|(split, dir)| SourceKind::Stl10 { split, dir })?,
            "store" => SourceKind::Store { dir: resolve_dir(rest) },
            "synthetic" => {
                let f: Vec<&str> = rest.split(':').collect();
                if !(3..=4).contains(&f.len()) {
                    return Err(Error::Config(
                        "expected `synthetic:<classes>:<count>:<side>[:<seed>]`".into(),
                    ));
                }
                SourceKind::Synthetic {
                    classes: parse_num(f[0], "class count")?,
                    count: parse_num(f[1], "image count")?,
                    side: parse_num(f[2], "side")?,
                    seed: f.get(3).map(|s| parse_num(s, "seed")).transpose()?,
                }
            }
            other => return Err(Error::Config(format!("unknown dataset format `{other}`"))),
        };
        let mut src = DatasetSource {
            kind,
            classes: None,
            limit: None,
            downscale: None,
        };
        for opt in parts {
            let (k, v) = opt
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `option=value`, got `{opt}`")))?;
            match k.trim() {
                "classes" => src.classes = Some(parse_list(v)?),
                "limit" => src.limit = Some(parse_num(v, "limit")?),
                "downscale" => src.downscale = Some(parse_num(v, "downscale factor")?),
                other => return Err(Error::Config(format!("unknown dataset option `{other}`"))),
            }
        }
        Ok(src)
    }
}

impl DatasetSource {
    /// Directory the source reads from, if any.
    pub fn dir(&self) -> Option<&Path> {
        match &self.kind {
            SourceKind::Cifar10 { dir, .. }
            | SourceKind::Cifar100 { dir, .. }
            | SourceKind::Stl10 { dir, .. }
            | SourceKind::Store { dir } => Some(dir),
            SourceKind::Synthetic { .. } => None,
        }
    }

    /// Loads the dataset. `stream` seeds synthetic sources that name no seed.
    pub fn load(&self, stream: &SeedStream) -> Result<LabeledDataset> {
        let base = match &self.kind {
            SourceKind::Cifar10 { split, dir } => load_cifar10(dir, *split)?,
            SourceKind::Cifar100 { split, dir } => load_cifar100(dir, *split)?,
            SourceKind::Stl10 { split, dir } => load_stl10(dir, *split)?,
            SourceKind::Store { dir } => load_dataset_dir(dir)?.0,
            SourceKind::Synthetic {
                classes,
                count,
                side,
                seed,
            } => {
                let seed = seed.unwrap_or_else(|| stream.derive("synthetic", 0));
                synthetic_dataset(&SyntheticSpec::new(*classes, *count, *side, seed))?
            }
        };
        let mut d = match (&self.classes, self.limit) {
            (Some(c), limit) => base.select_classes(c, limit)?,
            (None, Some(l)) => {
                let idx: Vec<usize> = (0..l.min(base.len())).collect();
                let name = format!("{}[..{l}]", base.name());
                base.subset(&idx, name)?
            }
            (None, None) => base,
        };
        if let Some(f) = self.downscale {
            d = d.downscale(f)?;
        }
        Ok(d)
    }
}

/// Feature extractor φ for the perceptual loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Pretrained VGG16 convolutional weights in safetensors. Relative paths
    /// resolve like dataset directories.
    File(PathBuf),
    /// Randomly initialized VGG16 features of the given width.
    Seeded(usize),
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("seeded:") {
            Some(w) => Ok(FeatureSource::Seeded(parse_num(w, "width")?)),
            None => Ok(FeatureSource::File(resolve_dir(s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Ga,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub train: Option<DatasetSource>,
    pub test: Option<DatasetSource>,
    pub protected: Option<DatasetSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectSection {
    pub model: Option<PathBuf>,
    /// h_theta recipe when the chain trains its own.
    pub network: NetworkSpec,
    pub spec: PerturbationSpec,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleGanSection {
    pub config: CycleGanConfig,
    pub classifier: Option<PathBuf>,
    pub features: Option<FeatureSource>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSection {
    pub model: Option<PathBuf>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub scheme: String,
    pub ga: GaConfig,
    pub paired: PairedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifySection {
    pub mode: ClassifyMode,
    pub config: ClassifyConfig,
    pub transform: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub reference: Option<DatasetSource>,
    pub test: Option<DatasetSource>,
    pub params: SsimParams,
}

/// A fully typed experiment. Module seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub out: PathBuf,
    pub results: Option<PathBuf>,
    pub run_id: Option<String>,
    pub data: DataSection,
    pub protect: ProtectSection,
    pub cyclegan: CycleGanSection,
    pub transform: TransformSection,
    pub attack: AttackSection,
    pub classify: ClassifySection,
    pub metrics: MetricsSection,
}

/// Typed reader over a [`RawConfig`] that collects every error.
struct Reader<'a> {
    raw: &'a RawConfig,
    errors: Vec<ConfigError>,
}

impl Reader<'_> {
    fn fail(&mut self, key: &str, message: impl Into<String>) {
        let line = self.raw.line(key);
        self.errors.push(ConfigError::at(line, key, message));
    }

    fn opt<T, F>(&mut self, key: &str, parse: F) -> Option<T>
    where
        F: FnOnce(&str) -> Result<T>,
    {
        let v = self.raw.get(key)?;
        match parse(v) {
            Ok(t) => Some(t),
            Err(e) => {
                let msg = match e {
                    Error::Config(m) | Error::Invalid(m) => m,
                    other => other.to_string(),
                };
                self.fail(key, msg);
                None
            }
        }
    }

    fn num<T: FromStr>(&mut self, key: &str, default: T) -> T {
        self.opt(key, |v| parse_num(v, "number")).unwrap_or(default)
    }

    fn list(&mut self, key: &str, default: Vec<usize>) -> Vec<usize> {
        self.opt(key, parse_list).unwrap_or(default)
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.opt(key, |v| Ok(PathBuf::from(v)))
    }

    fn source(&mut self, key: &str) -> Option<DatasetSource> {
        self.opt(key, str::parse)
    }

    fn check(&mut self, key: &str, r: Result<()>) {
        if let Err(e) = r {
            let msg = match e {
                Error::Config(m) | Error::Invalid(m) => m,
                other => other.to_string(),
            };
            self.fail(key, msg);
        }
    }

    fn require<T>(&mut self, key: &str, v: &Option<T>, pipeline: Pipeline) {
        if v.is_none() && self.raw.get(key).is_none() {
            self.errors.push(ConfigError::at(
                None,
                key,
                format!("required by pipeline `{pipeline}`"),
            ));
        }
    }

    fn exists(&mut self, key: &str, p: Option<&Path>) {
        if let Some(p) = p {
            if !p.exists() {
                self.fail(key, format!("path {} does not exist", p.display()));
            }
        }
    }
}

impl ExperimentConfig {
    /// Types and validates a raw configuration, reporting every problem.
    pub fn from_raw(raw: &RawConfig) -> std::result::Result<Self, Vec<ConfigError>> {
        let mut r = Reader {
            raw,
            errors: Vec::new(),
        };
        let pipeline = match raw.get("pipeline") {
            None => {
                r.errors
                    .push(ConfigError::at(None, "pipeline", "missing required key"));
                None
            }
            Some(_) => r.opt("pipeline", str::parse::<Pipeline>),
        };
        let seed: u64 = r.num("seed", 0);
        let stream = SeedStream::new(seed);
        let out = r.opt("out", |v| Ok(PathBuf::from(v)));
        if raw.get("out").is_none() {
            r.errors.push(ConfigError::at(None, "out", "missing required key"));
        }
        let results = r.opt("results", |v| Ok(PathBuf::from(v)));
        let run_id = raw.get("run_id").map(String::from);

        let data = DataSection {
            train: r.source("data.train"),
            test: r.source("data.test"),
            protected: r.source("data.protected"),
        };

        let eps = r.num("protect.eps", 0.3);
        let mut spec = PerturbationSpec::new(eps).with_iterations(r.num("protect.iters", 50));
        if let Some(a) = r.opt("protect.alpha", |v| parse_num(v, "number")) {
            spec = spec.with_alpha(a);
        }
        r.check("protect.eps", spec.validate());
        let h_arch = r
            .opt("protect.arch", |v| v.parse::<Architecture>().map_err(|e| Error::Config(e.to_string())))
            .unwrap_or(Architecture::Vgg13Bn);
        let h_width = r.num("protect.width", 64);
        let protect = ProtectSection {
            model: r.path("protect.model"),
            network: classifier_spec(h_arch, 2, h_width, stream.derive("protect.network", 0)),
            spec,
            batch_size: r.num("protect.batch_size", 64),
        };

        let mut cg = CycleGanConfig {
            epochs: r.num("cyclegan.epochs", 5000),
            lr: r.num("cyclegan.lr", 2e-4),
            beta1: r.num("cyclegan.beta1", 0.5),
            beta2: r.num("cyclegan.beta2", 0.999),
            batch_size: r.num("cyclegan.batch_size", 64),
            reduction: r
                .opt("cyclegan.reduction", str::parse::<NormReduction>)
                .unwrap_or(NormReduction::Mean),
            checkpoint_every: r.num("cyclegan.checkpoint_every", 100),
            replay_pool: r.num("cyclegan.replay_pool", 0),
            seed: stream.derive("cyclegan", 0),
            ..CycleGanConfig::default()
        };
        cg.weights.lambda = r.num("cyclegan.lambda", cg.weights.lambda);
        cg.weights.gamma1 = r.num("cyclegan.gamma1", cg.weights.gamma1);
        cg.weights.gamma2 = r.num("cyclegan.gamma2", cg.weights.gamma2);
        cg.weights.gamma3 = r.num("cyclegan.gamma3", cg.weights.gamma3);
        cg.generator = cg
            .generator
            .clone()
            .with_width(r.num("cyclegan.generator.width", cg.generator.base_width))
            .with_depth(r.num("cyclegan.generator.depth", cg.generator.depth));
        cg.discriminator = cg
            .discriminator
            .clone()
            .with_width(r.num("cyclegan.discriminator.width", cg.discriminator.base_width))
            .with_depth(r.num("cyclegan.discriminator.depth", cg.discriminator.depth));
        r.check("cyclegan.epochs", cg.validate());
        let cyclegan = CycleGanSection {
            config: cg,
            classifier: r.path("cyclegan.classifier"),
            features: r.opt("cyclegan.features", str::parse),
            resume: r.path("cyclegan.resume"),
        };

        let transform = TransformSection {
            model: r.path("transform.model"),
            batch_size: r.num("transform.batch_size", 64),
        };

        let kind = r
            .opt("attack.kind", |v| match v {
                "ga" => Ok(AttackKind::Ga),
                "paired" => Ok(AttackKind::Paired),
                other => Err(Error::Config(format!("unknown attack `{other}` (ga|paired)"))),
            })
            .unwrap_or(AttackKind::Ga);
        let scheme = raw.get("attack.scheme").unwrap_or("identity").to_string();
        let keyless_transform = Path::new(&scheme).exists();
        let mut ga = GaConfig {
            seed: stream.derive("attack.ga", 0),
            ..GaConfig::default()
        };
        if keyless_transform {
            ga = ga.against_transform();
        }
        let mut paired = PairedConfig {
            seed: stream.derive("attack.paired", 0),
            ..PairedConfig::default()
        };
        let gen_arch = r.opt("attack.generator", |v| {
            let a: Architecture = v.parse()?;
            match a {
                Architecture::ConvEncoderDecoder => Ok(NetworkSpec::conv_encoder_decoder()),
                Architecture::UnetGenerator => Ok(NetworkSpec::unet_generator().with_residual(true)),
                other => Err(Error::Config(format!("`{other}` is not a generator"))),
            }
        });
        if let Some(g) = gen_arch {
            ga.generator = g.clone();
            paired.generator = g;
        }
        for g in [&mut ga.generator, &mut paired.generator] {
            *g = g
                .clone()
                .with_width(r.num("attack.generator.width", g.base_width))
                .with_depth(r.num("attack.generator.depth", g.depth));
        }
        ga.discriminator = ga
            .discriminator
            .clone()
            .with_width(r.num("attack.discriminator.width", ga.discriminator.base_width))
            .with_depth(r.num("attack.discriminator.depth", ga.discriminator.depth));
        match kind {
            AttackKind::Ga => {
                ga.epochs = r.num("attack.epochs", ga.epochs);
                ga.lr = r.num("attack.lr", ga.lr);
                ga.batch_size = r.num("attack.batch_size", ga.batch_size);
                r.check("attack.epochs", ga.validate());
            }
            AttackKind::Paired => {
                paired.epochs = r.num("attack.epochs", paired.epochs);
                paired.lr = r.num("attack.lr", paired.lr);
                paired.batch_size = r.num("attack.batch_size", paired.batch_size);
                paired.lr_drop_epochs = r.list("attack.lr_drops", paired.lr_drop_epochs.clone());
                paired.lr_drop_factor = r.num("attack.lr_drop_factor", paired.lr_drop_factor);
                let s = paired.schedule().and_then(|s| s.check_within(paired.epochs));
                r.check("attack.lr_drops", s);
            }
        }
        let attack = AttackSection {
            kind,
            scheme,
            ga,
            paired,
        };

        let mode = r
            .opt("classify.mode", |v| match v {
                "train" => Ok(ClassifyMode::Train),
                "eval" => Ok(ClassifyMode::Eval),
                other => Err(Error::Config(format!("unknown mode `{other}` (train|eval)"))),
            })
            .unwrap_or(ClassifyMode::Train);
        let c_arch = r
            .opt("classify.arch", |v| v.parse::<Architecture>().map_err(|e| Error::Config(e.to_string())))
            .unwrap_or(Architecture::Resnet18);
        let c_width = r.num("classify.width", 64);
        // The class count is fixed once the training data is loaded.
        let mut cc = ClassifyConfig::new(classifier_spec(c_arch, 2, c_width, stream.derive("classify.network", 0)));
        cc.epochs = r.num("classify.epochs", cc.epochs);
        cc.lr = r.num("classify.lr", cc.lr);
        cc.lr_drop_epochs = r.list("classify.lr_drops", cc.lr_drop_epochs.clone());
        cc.lr_drop_factor = r.num("classify.lr_drop_factor", cc.lr_drop_factor);
        cc.weight_decay = r.num("classify.weight_decay", cc.weight_decay);
        cc.momentum = r.num("classify.momentum", cc.momentum);
        cc.batch_size = r.num("classify.batch_size", cc.batch_size);
        cc.seed = stream.derive("classify", 0);
        cc.augment = r
            .opt("classify.augment", |v| match v {
                "cifar" => Ok(None),
                "none" => Ok(Some(AugmentSpec::identity(3))),
                other => Err(Error::Config(format!("unknown augmentation `{other}` (cifar|none)"))),
            })
            .flatten();
        r.check("classify.lr_drops", cc.validate());
        let c_transform = r.opt("classify.transform", |v| {
            Ok((v != "none").then(|| PathBuf::from(v)))
        });
        let classify = ClassifySection {
            mode,
            config: cc,
            transform: c_transform.flatten(),
            model: r.path("classify.model"),
        };

        let mut params = SsimParams {
            luminance_only: r.num("metrics.luminance_only", false),
            ..SsimParams::default()
        };
        params.window = r.num("metrics.window", params.window);
        r.check("metrics.window", params.validate());
        let metrics = MetricsSection {
            reference: r.source("metrics.reference"),
            test: r.source("metrics.test"),
            params,
        };

        for (key, p) in [
            ("protect.model", protect.model.as_deref()),
            ("cyclegan.classifier", cyclegan.classifier.as_deref()),
            ("cyclegan.resume", cyclegan.resume.as_deref()),
            ("transform.model", transform.model.as_deref()),
            ("classify.transform", classify.transform.as_deref()),
            ("classify.model", classify.model.as_deref()),
        ] {
            r.exists(key, p);
        }
        if let Some(FeatureSource::File(p)) = &cyclegan.features {
            r.exists("cyclegan.features", Some(p));
        }
        for (key, s) in [
            ("data.train", &data.train),
            ("data.test", &data.test),
            ("data.protected", &data.protected),
            ("metrics.reference", &metrics.reference),
            ("metrics.test", &metrics.test),
        ] {
            r.exists(key, s.as_ref().and_then(|s| s.dir()));
        }

        if let Some(p) = pipeline {
            use Pipeline::*;
            match p {
                Protect => {
                    r.require("data.train", &data.train, p);
                    r.require("protect.model", &protect.model, p);
                }
                TrainTransform => {
                    r.require("data.train", &data.train, p);
                    r.require("data.protected", &data.protected, p);
                    r.require("cyclegan.classifier", &cyclegan.classifier, p);
                    r.require("cyclegan.features", &cyclegan.features, p);
                }
                Transform => {
                    r.require("transform.model", &transform.model, p);
                    if data.train.is_none() && data.test.is_none() {
                        r.require("data.train", &data.train, p);
                    }
                }
                Attack => {
                    r.require("data.train", &data.train, p);
                    r.require("data.test", &data.test, p);
                }
                Classify => {
                    r.require("data.test", &data.test, p);
                    match mode {
                        ClassifyMode::Train => r.require("data.train", &data.train, p),
                        ClassifyMode::Eval => r.require("classify.model", &classify.model, p),
                    }
                }
                Metrics => {
                    r.require("metrics.reference", &metrics.reference, p);
                    r.require("metrics.test", &metrics.test, p);
                }
                Chain => {
                    r.require("data.train", &data.train, p);
                    r.require("data.test", &data.test, p);
                    r.require("cyclegan.features", &cyclegan.features, p);
                }
            }
        }

        let mut errors = r.errors;
        errors.dedup();
        match (pipeline, out) {
            (Some(pipeline), Some(out)) if errors.is_empty() => Ok(ExperimentConfig {
                pipeline,
                seed,
                out,
                results,
                run_id,
                data,
                protect,
                cyclegan,
                transform,
                attack,
                classify,
                metrics,
            }),
            _ => Err(errors),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = RawConfig::from_file(path).map_err(|e| combine(&e))?;
        Self::from_raw(&raw).map_err(|e| combine(&e))
    }

    /// Stable hash of the typed configuration.
    pub fn hash(&self) -> Result<String> {
        crate::models::config_hash(self)
    }
}

fn classifier_spec(arch: Architecture, classes: usize, width: usize, seed: u64) -> NetworkSpec {
    let spec = match arch {
        Architecture::Vgg13Bn => NetworkSpec::vgg13_bn(classes),
        _ => NetworkSpec::resnet18(classes),
    };
    spec.with_width(width).with_seed(seed)
}

/// Checks a configuration file without running anything. An empty list
/// means the file is valid.
/// Syntax and typed checks together, ordered by line.
pub fn validate(path: &Path) -> Vec<ConfigError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            return vec![ConfigError {
                line: None,
                key: None,
                message: format!("cannot read {}: {e}", path.display()),
            }]
        }
    };
    let (raw, mut errors) = RawConfig::parse_lenient(&text);
    if !raw.entries.is_empty() {
        errors.extend(ExperimentConfig::from_raw(&raw).err().unwrap_or_default());
    }
    errors.sort_by_key(|e| e.line.unwrap_or(usize::MAX));
    errors
}
