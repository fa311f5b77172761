//! Runs a configured experiment and records a manifest of what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    evaluate_attack, scheme_by_name, scheme_pairs, train_ga, train_paired_attack,
    EncryptionScheme, TransformScheme,
};
use crate::classify::{evaluate_accuracy, load_classifier, save_classifier, train_classifier};
use crate::config::{AttackKind, ClassifyMode, ExperimentConfig, FeatureSource, Pipeline};
use crate::data::{save_dataset_dir, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{append_results, mean_ssim, ResultRow};
use crate::models::{ModelHandle, NetworkSpec};
use crate::protect::protect_dataset;
use crate::rng::SeedStream;
use crate::transform::{load_transform, transform_dataset, CycleGanTrainer};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Succeeded,
    Failed,
}

/// One produced artifact. `path` is relative to the run directory; a
/// directory's digest covers every file under it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub stage: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: Pipeline,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub stages: Vec<String>,
    pub outputs: Vec<OutputRecord>,
    /// Headline numbers per stage (accuracy, mean SSIM, final losses).
    pub summary: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
    pub last_checkpoint: Option<PathBuf>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Output digests keyed by path.
    pub fn checksums(&self) -> BTreeMap<PathBuf, String> {
        self.outputs
            .iter()
            .map(|o| (o.path.clone(), o.sha256.clone()))
            .collect()
    }
}

/// SHA-256 of a file, or of the sorted `(relative path, file digest)` list
/// of a directory.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update(digest_path(&path.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
        }
    }
    Ok(())
}

/// Most recently written checkpoint under `dir`.
fn newest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files).ok()?;
    files
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "safetensors"))
        .map(|p| dir.join(p))
        .filter_map(|p| Some((fs::metadata(&p).ok()?.modified().ok()?, p)))
        .max()
        .map(|(_, p)| p)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    stream: SeedStream,
    stages: Vec<String>,
    outputs: Vec<OutputRecord>,
    summary: BTreeMap<String, f64>,
    rows: Vec<ResultRow>,
}

impl Run<'_> {
    fn dir(&self, stage: &str) -> PathBuf {
        self.cfg.out.join(stage)
    }

    fn record(&mut self, stage: &str, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.cfg.out).unwrap_or(path).to_path_buf();
        self.outputs.push(OutputRecord {
            stage: stage.into(),
            path: rel,
            sha256: digest_path(path)?,
        });
        Ok(())
    }

    fn done(&mut self, stage: &str) {
        log::info!("stage {stage} finished");
        self.stages.push(stage.into());
    }

    fn dataset(&self, role: &str) -> Result<LabeledDataset> {
        let src = match role {
            "data.train" => &self.cfg.data.train,
            "data.test" => &self.cfg.data.test,
            "data.protected" => &self.cfg.data.protected,
            "metrics.reference" => &self.cfg.metrics.reference,
            "metrics.test" => &self.cfg.metrics.test,
            _ => &None,
        };
        let src = src
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{role}` is not set")))?;
        let d = src.load(&self.stream.child(role))?;
        log::info!("{role}: {} images from {}", d.len(), d.name());
        Ok(d)
    }

    fn row(&mut self, scheme: &str, attack: &str, dataset: &str, ssim: Option<f64>, accuracy: Option<f64>) {
        let run_id = self
            .cfg
            .run_id
            .clone()
            .unwrap_or_else(|| self.cfg.pipeline.to_string());
        self.rows.push(ResultRow {
            run_id,
            scheme: scheme.into(),
            attack: attack.into(),
            dataset: dataset.into(),
            ssim,
            accuracy,
        });
    }

    fn save_dataset(&mut self, stage: &str, dir: &Path, d: &LabeledDataset, meta: serde_json::Value) -> Result<()> {
        save_dataset_dir(dir, d, meta)?;
        self.record(stage, dir)
    }

    /// Trains h_theta with the classify recipe on the plain training set.
    fn train_h_theta(&mut self, train: &LabeledDataset) -> Result<ModelHandle> {
        let mut cc = self.cfg.classify.config.clone();
        cc.network = self.cfg.protect.network.clone();
        cc.network.num_classes = train.num_classes();
        cc.seed = self.stream.derive("h_theta", 0);
        let dir = self.dir("h_theta");
        let (h, hist) = train_classifier(train, None, None, &cc, Some(&dir))?;
        if let Some(last) = hist.last() {
            self.summary.insert("h_theta.train_loss".into(), last.train_loss);
        }
        let path = dir.join("h_theta.safetensors");
        save_classifier(&path, &h, &crate::models::config_hash(&cc)?, cc.epochs)?;
        self.record("protect", &path)?;
        Ok(h)
    }

    fn protect(&mut self, d: &LabeledDataset, h: &ModelHandle) -> Result<LabeledDataset> {
        let p = &self.cfg.protect;
        let protected = protect_dataset(d, h, &p.spec, p.batch_size)?;
        let meta = serde_json::json!({ "spec": p.spec, "model": h.checksum(), "source": d.name() });
        let dir = self.dir("protected");
        self.save_dataset("protect", &dir, &protected, meta)?;
        Ok(protected)
    }

    fn features(&self) -> Result<ModelHandle> {
        let spec = match &self.cfg.cyclegan.features {
            Some(FeatureSource::File(p)) => NetworkSpec::vgg16_features(p),
            Some(FeatureSource::Seeded(w)) => {
                NetworkSpec::vgg16_features_seeded(*w, self.stream.derive("features", 0))
            }
            None => return Err(Error::Config("`cyclegan.features` is not set".into())),
        };
        ModelHandle::build(&spec)
    }

    fn train_transform(
        &mut self,
        plain: &LabeledDataset,
        protected: &LabeledDataset,
        h: &ModelHandle,
    ) -> Result<ModelHandle> {
        let phi = self.features()?;
        let cg = &self.cfg.cyclegan;
        let dir = self.dir("cyclegan");
        let trainer = match &cg.resume {
            Some(ck) => CycleGanTrainer::resume(ck, plain, protected, h, &phi, &cg.config, Some(&dir))?,
            None => CycleGanTrainer::new(plain, protected, h, &phi, &cg.config, Some(&dir))?,
        };
        let outcome = trainer.train()?;
        if let Some(last) = outcome.reports.last() {
            self.summary.insert("cyclegan.l_cyc".into(), last.l_cyc);
            self.summary.insert("cyclegan.l_gan".into(), last.l_gan);
        }
        let ck = outcome
            .checkpoint
            .ok_or_else(|| Error::Checkpoint("trainer wrote no checkpoint".into()))?;
        self.record("train-transform", &ck)?;
        let losses = dir.join("losses.jsonl");
        if losses.is_file() {
            self.record("train-transform", &losses)?;
        }
        Ok(outcome.nets.g_ab)
    }

    fn transform(&mut self, g: &ModelHandle, d: &LabeledDataset, split: &str) -> Result<LabeledDataset> {
        let t = transform_dataset(g, d, self.cfg.transform.batch_size)?;
        let meta = serde_json::json!({ "transform": g.checksum(), "source": d.name() });
        let dir = self.dir("transformed").join(split);
        self.save_dataset("transform", &dir, &t, meta)?;
        Ok(t)
    }

    fn classify(
        &mut self,
        train: &LabeledDataset,
        test: &LabeledDataset,
        transform: Option<&ModelHandle>,
    ) -> Result<f64> {
        let mut cc = self.cfg.classify.config.clone();
        cc.network.num_classes = train.num_classes();
        let dir = self.dir("classify");
        let (model, _) = train_classifier(train, Some(test), transform, &cc, Some(&dir))?;
        let path = dir.join("classifier.safetensors");
        save_classifier(&path, &model, &crate::models::config_hash(&cc)?, cc.epochs)?;
        let acc = evaluate_accuracy(&model, test, transform, cc.batch_size)?;
        self.finish_classify(&dir, acc)?;
        self.record("classify", &path)?;
        self.record("classify", &dir.join("history.jsonl"))?;
        Ok(acc)
    }

    fn finish_classify(&mut self, dir: &Path, acc: f64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let eval = dir.join("eval.json");
        let body = serde_json::to_vec_pretty(&serde_json::json!({ "accuracy": acc }))?;
        fs::write(&eval, body).map_err(|e| Error::io(&eval, e))?;
        self.record("classify", &eval)?;
        self.summary.insert("classify.accuracy".into(), acc);
        Ok(())
    }

    fn metrics(&mut self, reference: &LabeledDataset, test: &LabeledDataset) -> Result<f64> {
        if reference.len() != test.len() {
            return Err(Error::Invalid(format!(
                "reference and test sets differ in size ({} vs {})",
                reference.len(),
                test.len()
            )));
        }
        let params = self.cfg.metrics.params;
        let (mean, per) = mean_ssim(reference.images().zip(test.images()), &params)?;
        let dir = self.dir("metrics");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let report = dir.join("report.json");
        let body = serde_json::json!({
            "reference": reference.name(),
            "test": test.name(),
            "count": per.len(),
            "mean_ssim": mean,
            "params": params,
        });
        fs::write(&report, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&report, e))?;
        let csv_path = dir.join("per_image.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["index", "ssim"])?;
        for (i, v) in per.iter().enumerate() {
            w.write_record([i.to_string(), format!("{v}")])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        self.record("metrics", &report)?;
        self.record("metrics", &csv_path)?;
        self.summary.insert("metrics.mean_ssim".into(), mean);
        Ok(mean)
    }

    fn attack(&mut self) -> Result<()> {
        let a = &self.cfg.attack;
        let scheme: Box<dyn EncryptionScheme> = if Path::new(&a.scheme).is_file() {
            Box::new(TransformScheme {
                g: load_transform(Path::new(&a.scheme))?,
                label: "h_p".into(),
            })
        } else {
            scheme_by_name(&a.scheme, self.stream.derive("scheme", 0))?
        };
        let train = self.dataset("data.train")?;
        let test = self.dataset("data.test")?;
        let dir = self.dir("attack");
        let (g, name) = match a.kind {
            AttackKind::Ga => (train_ga(scheme.as_ref(), &train, &a.ga, Some(&dir))?.g_att, "ga"),
            AttackKind::Paired => {
                let pairs = scheme_pairs(scheme.as_ref(), &train)?;
                (train_paired_attack(&pairs, &a.paired, Some(&dir))?.0, "paired")
            }
        };
        let report = evaluate_attack(&g, scheme.as_ref(), &test, name, &self.cfg.metrics.params)?;
        let (json, csv_path) = report.write(&dir)?;
        self.record("attack", &dir.join("last-good.safetensors"))?;
        self.record("attack", &json)?;
        self.record("attack", &csv_path)?;
        self.summary.insert("attack.mean_ssim".into(), report.mean_ssim);
        self.row(&report.scheme, name, &report.dataset, Some(report.mean_ssim), None);
        self.done("attack");
        Ok(())
    }

    fn execute(&mut self) -> Result<()> {
        let cfg = self.cfg;
        match cfg.pipeline {
            Pipeline::Protect => {
                let model = cfg.protect.model.as_deref().ok_or(Error::Empty("protect.model"))?;
                let h = load_classifier(model)?;
                let d = self.dataset("data.train")?;
                self.protect(&d, &h)?;
                self.done("protect");
            }
            Pipeline::TrainTransform => {
                let path = cfg.cyclegan.classifier.as_deref().ok_or(Error::Empty("cyclegan.classifier"))?;
                let h = load_classifier(path)?;
                let plain = self.dataset("data.train")?;
                let protected = self.dataset("data.protected")?;
                self.train_transform(&plain, &protected, &h)?;
                self.done("train-transform");
            }
            Pipeline::Transform => {
                let g = load_transform(cfg.transform.model.as_deref().ok_or(Error::Empty("transform.model"))?)?;
                for (role, split) in [("data.train", "train"), ("data.test", "test")] {
                    let set = match role {
                        "data.train" => cfg.data.train.is_some(),
                        _ => cfg.data.test.is_some(),
                    };
                    if set {
                        let d = self.dataset(role)?;
                        self.transform(&g, &d, split)?;
                    }
                }
                self.done("transform");
            }
            Pipeline::Attack => self.attack()?,
            Pipeline::Classify => {
                let transform = cfg.classify.transform.as_deref().map(load_transform).transpose()?;
                let test = self.dataset("data.test")?;
                let acc = match cfg.classify.mode {
                    ClassifyMode::Train => {
                        let train = self.dataset("data.train")?;
                        self.classify(&train, &test, transform.as_ref())?
                    }
                    ClassifyMode::Eval => {
                        let model = load_classifier(cfg.classify.model.as_deref().ok_or(Error::Empty("classify.model"))?)?;
                        let acc = evaluate_accuracy(&model, &test, transform.as_ref(), cfg.classify.config.batch_size)?;
                        let dir = self.dir("classify");
                        self.finish_classify(&dir, acc)?;
                        acc
                    }
                };
                let scheme = if transform.is_some() { "h_p" } else { "plain" };
                self.row(scheme, "none", test.name(), None, Some(acc));
                self.done("classify");
            }
            Pipeline::Metrics => {
                let reference = self.dataset("metrics.reference")?;
                let test = self.dataset("metrics.test")?;
                let mean = self.metrics(&reference, &test)?;
                self.row(test.name(), "none", reference.name(), Some(mean), None);
                self.done("metrics");
            }
            Pipeline::Chain => {
                let train = self.dataset("data.train")?;
                let test = self.dataset("data.test")?;
                let h = match cfg.protect.model.as_deref() {
                    Some(p) => load_classifier(p)?,
                    None => self.train_h_theta(&train)?,
                };
                let protected = self.protect(&train, &h)?;
                self.done("protect");
                let g = self.train_transform(&train, &protected, &h)?;
                drop(protected);
                self.done("train-transform");
                self.transform(&g, &train, "train")?;
                let t_test = self.transform(&g, &test, "test")?;
                self.done("transform");
                let acc = self.classify(&train, &test, Some(&g))?;
                self.done("classify");
                let mean = self.metrics(&test, &t_test)?;
                self.done("metrics");
                self.row("h_p", "none", test.name(), Some(mean), Some(acc));
            }
        }
        Ok(())
    }
}

/// Executes the configured pipeline and writes `manifest.json` into the
/// output directory, whether or not the run succeeded. The returned error is
/// reserved for failures to write the manifest itself.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let mut r = Run {
        cfg,
        stream: SeedStream::new(cfg.seed),
        stages: Vec::new(),
        outputs: Vec::new(),
        summary: BTreeMap::new(),
        rows: Vec::new(),
    };
    let mut outcome = r.execute();
    if outcome.is_ok() && !r.rows.is_empty() {
        if let Some(results) = &cfg.results {
            outcome = append_results(results, &r.rows).map(|_| ());
        }
    }
    let (status, error, last_checkpoint) = match &outcome {
        Ok(()) => (RunStatus::Succeeded, None, None),
        Err(e) => {
            log::error!("pipeline {} failed: {e}", cfg.pipeline);
            (RunStatus::Failed, Some(e.to_string()), newest_checkpoint(&cfg.out))
        }
    };
    let versions = BTreeMap::from([
        ("ganprotect".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint".to_string(), crate::models::CHECKPOINT_VERSION.to_string()),
    ]);
    let manifest = RunManifest {
        pipeline: cfg.pipeline,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        versions,
        status,
        error,
        stages: r.stages,
        outputs: r.outputs,
        summary: r.summary,
        wall_time_secs: start.elapsed().as_secs_f64(),
        last_checkpoint,
        config: cfg.clone(),
    };
    let path = cfg.out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RawConfig;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_raw(&RawConfig::parse(text).unwrap()).unwrap()
    }

    #[test]
    fn metrics_on_identical_sets_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(&format!(
            "pipeline = metrics\nout = {}\nmetrics.reference = synthetic:2:6:16:4\nmetrics.test = synthetic:2:6:16:4\n",
            dir.path().display()
        ));
        let m = run(&cfg).unwrap();
        assert_eq!(m.status, RunStatus::Succeeded);
        assert_eq!(m.summary["metrics.mean_ssim"], 1.0);
        assert_eq!(m.stages, vec!["metrics"]);
        let back = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.checksums(), m.checksums());
    }

    #[test]
    fn failure_is_recorded_in_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(&format!(
            "pipeline = metrics\nout = {}\nmetrics.reference = synthetic:2:6:16\nmetrics.test = synthetic:2:5:16\n",
            dir.path().display()
        ));
        let m = run(&cfg).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.error.unwrap().contains("differ in size"));
        let back = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.status, RunStatus::Failed);
    }

    #[test]
    fn directory_digest_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x"), b"1").unwrap();
        let d1 = digest_path(dir.path()).unwrap();
        assert_eq!(d1, digest_path(dir.path()).unwrap());
        fs::write(dir.path().join("a/x"), b"2").unwrap();
        assert_ne!(d1, digest_path(dir.path()).unwrap());
    }
}
