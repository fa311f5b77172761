use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ganprotect::config::{validate, ConfigError, DATA_ROOT_ENV};
use ganprotect::data::synth::{synthetic_dataset, SyntheticSpec};
use ganprotect::data::{save_dataset_dir, write_cifar10, write_cifar100, write_stl10};
use ganprotect::{run, ExperimentConfig, RawConfig, RunManifest, RunStatus, Split};

#[derive(Parser)]
#[command(name = "ganprotect", version, about = "Visual protection transforms and attacks on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Results CSV to append metric rows to.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Perturb a dataset so the classifier's loss drops while pixels change.
    Protect {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the CycleGAN whose generator becomes the transform.
    TrainTransform {
        #[arg(long)]
        plain: Option<String>,
        #[arg(long)]
        protected: Option<String>,
        /// h_theta checkpoint.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// VGG16 feature weights or `seeded:<width>`.
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a trained transform to a dataset.
    Transform {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        test: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a reconstruction attack and report SSIM on held-out images.
    Attack {
        kind: AttackKindArg,
        /// identity | block_shuffle | negpos_flip | <h_p checkpoint>
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        test: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train or evaluate a classifier, optionally behind a transform.
    Classify {
        mode: ClassifyModeArg,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        test: Option<String>,
        /// h_p checkpoint or `none`.
        #[arg(long)]
        transform: Option<String>,
        /// Classifier checkpoint (eval).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Image-quality metrics.
    Metrics {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Run whatever pipeline a configuration file names.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Check a configuration file and list every problem.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Write a procedural dataset in one of the supported layouts.
    Synth {
        #[arg(long, value_enum, default_value = "store")]
        format: SynthFormat,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Metric {
    /// Mean SSIM between two datasets, item by item.
    Ssim {
        #[arg(long = "ref")]
        reference: String,
        #[arg(long)]
        test: String,
        #[arg(long)]
        luminance_only: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKindArg {
    Ga,
    Paired,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifyModeArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthFormat {
    Store,
    Cifar10,
    Cifar100,
    Stl10,
}

/// `cifar10`, `cifar100` and `stl10` alone mean that dataset under the data
/// root; anything else is a full source string.
fn expand_source(s: &str, split: &str) -> String {
    match s {
        "cifar10" | "cifar100" | "stl10" => format!("{s}:{split}:."),
        _ if Path::new(s).is_dir() => format!("store:{s}"),
        _ => s.to_string(),
    }
}

struct Overrides {
    raw: RawConfig,
}

impl Overrides {
    fn new(pipeline: &str, common: &Common) -> anyhow::Result<Self> {
        let mut raw = match &common.config {
            Some(path) => RawConfig::from_file(path).map_err(report_errors)?,
            None => RawConfig::default(),
        };
        raw.set("pipeline", pipeline)?;
        let mut o = Self { raw };
        o.opt("seed", common.seed)?;
        o.opt("out", common.out.as_ref().map(|p| p.display()))?;
        o.opt("results", common.results.as_ref().map(|p| p.display()))?;
        Ok(o)
    }

    fn opt<T: ToString>(&mut self, key: &str, v: Option<T>) -> anyhow::Result<&mut Self> {
        if let Some(v) = v {
            self.raw.set(key, v.to_string())?;
        }
        Ok(self)
    }

    fn source(&mut self, key: &str, v: Option<&String>, split: &str) -> anyhow::Result<&mut Self> {
        self.opt(key, v.map(|s| expand_source(s, split)))
    }

    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::from_raw(&self.raw).map_err(report_errors)
    }
}

fn report_errors(errors: Vec<ConfigError>) -> anyhow::Error {
    for e in &errors {
        eprintln!("error: {e}");
    }
    anyhow::anyhow!("{} configuration error(s)", errors.len())
}

fn execute(cfg: &ExperimentConfig) -> anyhow::Result<RunManifest> {
    log::info!("running {} into {}", cfg.pipeline, cfg.out.display());
    let manifest = run(cfg)?;
    println!("{}", serde_json::to_string_pretty(&manifest.summary)?);
    println!("manifest: {}", cfg.out.join(ganprotect::pipeline::MANIFEST_FILE).display());
    if manifest.status == RunStatus::Failed {
        if let Some(ck) = &manifest.last_checkpoint {
            eprintln!("last checkpoint: {}", ck.display());
        }
        bail!("{}", manifest.error.clone().unwrap_or_else(|| "run failed".into()));
    }
    Ok(manifest)
}

fn main_inner(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Protect {
            model,
            dataset,
            eps,
            alpha,
            iters,
            common,
        } => {
            let mut o = Overrides::new("protect", &common)?;
            o.opt("protect.model", model.map(|p| p.display().to_string()))?
                .source("data.train", dataset.as_ref(), "train")?
                .opt("protect.eps", eps)?
                .opt("protect.alpha", alpha)?
                .opt("protect.iters", iters)?;
            execute(&o.config()?)?;
        }
        Command::TrainTransform {
            plain,
            protected,
            classifier,
            features,
            epochs,
            resume,
            common,
        } => {
            let mut o = Overrides::new("train-transform", &common)?;
            o.source("data.train", plain.as_ref(), "train")?
                .source("data.protected", protected.as_ref(), "train")?
                .opt("cyclegan.classifier", classifier.map(|p| p.display().to_string()))?
                .opt("cyclegan.features", features)?
                .opt("cyclegan.epochs", epochs)?
                .opt("cyclegan.resume", resume.map(|p| p.display().to_string()))?;
            execute(&o.config()?)?;
        }
        Command::Transform {
            model,
            dataset,
            test,
            common,
        } => {
            let mut o = Overrides::new("transform", &common)?;
            o.opt("transform.model", model.map(|p| p.display().to_string()))?
                .source("data.train", dataset.as_ref(), "train")?
                .source("data.test", test.as_ref(), "test")?;
            execute(&o.config()?)?;
        }
        Command::Attack {
            kind,
            scheme,
            dataset,
            test,
            epochs,
            common,
        } => {
            let mut o = Overrides::new("attack", &common)?;
            let kind = match kind {
                AttackKindArg::Ga => "ga",
                AttackKindArg::Paired => "paired",
            };
            // A bare dataset name also supplies the matching test split.
            let test = test.or_else(|| {
                dataset
                    .as_ref()
                    .filter(|d| ["cifar10", "cifar100", "stl10"].contains(&d.as_str()))
                    .cloned()
            });
            o.opt("attack.kind", Some(kind))?
                .opt("attack.scheme", scheme)?
                .source("data.train", dataset.as_ref(), "train")?
                .source("data.test", test.as_ref(), "test")?
                .opt("attack.epochs", epochs)?;
            execute(&o.config()?)?;
        }
        Command::Classify {
            mode,
            arch,
            dataset,
            test,
            transform,
            model,
            epochs,
            common,
        } => {
            let mut o = Overrides::new("classify", &common)?;
            let mode = match mode {
                ClassifyModeArg::Train => "train",
                ClassifyModeArg::Eval => "eval",
            };
            let test = test.or_else(|| {
                dataset
                    .as_ref()
                    .filter(|d| ["cifar10", "cifar100", "stl10"].contains(&d.as_str()))
                    .cloned()
            });
            let (train, test) = match mode {
                "train" => (dataset, test),
                _ => (None, test.or(dataset)),
            };
            o.opt("classify.mode", Some(mode))?
                .opt("classify.arch", arch)?
                .source("data.train", train.as_ref(), "train")?
                .source("data.test", test.as_ref(), "test")?
                .opt("classify.transform", transform)?
                .opt("classify.model", model.map(|p| p.display().to_string()))?
                .opt("classify.epochs", epochs)?;
            execute(&o.config()?)?;
        }
        Command::Metrics {
            metric:
                Metric::Ssim {
                    reference,
                    test,
                    luminance_only,
                    mut common,
                },
        } => {
            // `--out report.json` names the report itself; the run directory
            // sits next to it.
            let report_file = common
                .out
                .clone()
                .filter(|p| p.extension().is_some_and(|e| e == "json"));
            if let Some(f) = &report_file {
                common.out = Some(f.with_extension("run"));
            }
            let mut o = Overrides::new("metrics", &common)?;
            o.source("metrics.reference", Some(&reference), "test")?
                .source("metrics.test", Some(&test), "test")?
                .opt("metrics.luminance_only", luminance_only.then_some(true))?;
            let cfg = o.config()?;
            execute(&cfg)?;
            if let Some(f) = report_file {
                let src = cfg.out.join("metrics").join("report.json");
                std::fs::copy(&src, &f).with_context(|| format!("copying report to {}", f.display()))?;
            }
        }
        Command::Run { common } => {
            if common.config.is_none() {
                bail!("`run` needs --config");
            }
            let raw = RawConfig::from_file(common.config.as_deref().unwrap_or(Path::new("")))
                .map_err(report_errors)?;
            let pipeline = raw.get("pipeline").unwrap_or("").to_string();
            let o = Overrides::new(&pipeline, &common)?;
            execute(&o.config()?)?;
        }
        Command::Validate { common } => {
            let Some(path) = common.config else {
                bail!("`validate` needs --config");
            };
            let errors = validate(&path);
            if !errors.is_empty() {
                return Err(report_errors(errors));
            }
            println!("{}: ok", path.display());
        }
        Command::Synth {
            format,
            classes,
            count,
            side,
            split,
            seed,
            out,
        } => {
            let split: Split = split.parse()?;
            let d = synthetic_dataset(&SyntheticSpec::new(classes, count, side, seed))?;
            match format {
                SynthFormat::Store => {
                    save_dataset_dir(&out, &d, serde_json::json!({ "synthetic_seed": seed }))?;
                }
                SynthFormat::Cifar10 => write_cifar10(&out, split, &d)?,
                SynthFormat::Cifar100 => write_cifar100(&out, split, &d)?,
                SynthFormat::Stl10 => write_stl10(&out, split, &d)?,
            }
            println!("wrote {} images to {}", d.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if std::env::var_os(DATA_ROOT_ENV).is_none() {
                log::debug!("{DATA_ROOT_ENV} is not set; relative dataset paths use the working directory");
            }
            ExitCode::FAILURE
        }
    }
}
