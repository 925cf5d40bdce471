use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::DatasetSpec;
use crate::backbone::MpditConfig;
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::sampler::SampleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub checkpoint_dir: PathBuf,
    pub metrics_file: PathBuf,
    pub output_dir: PathBuf,
    /// Also write `step,loss` rows here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_csv: Option<PathBuf>,
    /// Render the loss curve as a PGM image here at the end of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_pgm: Option<PathBuf>,
    /// Write a channel-0 grid of the samples as PGM.
    #[serde(default)]
    pub sample_pgm: bool,
}

/// Models compared by `analyze`, by preset name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSpec {
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

/// A run as written on disk: the model is either inline or a preset name.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    #[serde(default)]
    model_preset: Option<String>,
    #[serde(default)]
    model: Option<MpditConfig>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    sample: SampleConfig,
    dataset: DatasetSpec,
    paths: Paths,
    #[serde(default)]
    analyze: Option<AnalyzeSpec>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub model: MpditConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub dataset: DatasetSpec,
    pub paths: Paths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze: Option<AnalyzeSpec>,
}

/// Fields that may change between a checkpoint and the run resuming it.
const RESUMABLE: &[&str] = &[
    "name",
    "paths.",
    "sample.",
    "analyze.",
    "train.total_steps",
    "train.log_every",
    "train.checkpoint_every",
    "train.prefetch",
];

impl RunConfig {
    /// Parse and validate. Relative paths in `paths` are taken relative to
    /// `base`.
    pub fn from_toml(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let parse = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            msg,
        };
        let raw: RawRun = toml::from_str(text).map_err(|e| parse(e.to_string()))?;
        let model = match (raw.model_preset, raw.model) {
            (Some(p), None) => MpditConfig::preset(&p)
                .ok_or_else(|| parse(format!("model_preset: unknown preset `{p}`")))?,
            (None, Some(m)) => m,
            (Some(_), Some(_)) => return Err(parse("set either `model_preset` or `[model]`, not both".into())),
            (None, None) => return Err(parse("missing `model_preset` or `[model]`".into())),
        };
        let mut paths = raw.paths;
        for p in [&mut paths.checkpoint_dir, &mut paths.metrics_file, &mut paths.output_dir]
            .into_iter()
            .chain(paths.loss_csv.as_mut())
            .chain(paths.loss_pgm.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let run = RunConfig {
            name: raw.name,
            model,
            train: raw.train,
            sample: raw.sample,
            dataset: raw.dataset,
            paths,
            analyze: raw.analyze,
        };
        run.validate().map_err(|e| match e {
            Error::Config(msg) => parse(msg),
            other => other,
        })?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base)
    }

    /// Cross-field checks; messages name the offending field.
    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| match e {
            Error::Config(msg) => Error::config(format!("{section}: {msg}")),
            other => other,
        };
        if self.name.is_empty() {
            return Err(Error::config("name: must not be empty"));
        }
        for (field, seed) in [("train.seed", self.train.seed), ("sample.seed", self.sample.seed)] {
            if seed > i64::MAX as u64 {
                return Err(Error::config(format!("{field}: {seed} exceeds {}", i64::MAX)));
            }
        }
        self.model.validate().map_err(|e| ctx("model", e))?;
        self.train.validate().map_err(|e| ctx("train", e))?;
        self.sample.validate().map_err(|e| ctx("sample", e))?;
        self.dataset.validate().map_err(|e| ctx("dataset", e))?;
        if let Some(c) = self.sample.classes.iter().find(|&&c| c > self.model.num_classes) {
            return Err(Error::config(format!(
                "sample.classes: class {c} out of range for model.num_classes = {} (the null class is {})",
                self.model.num_classes, self.model.num_classes
            )));
        }
        if let Some(latent) = self.dataset.latent() {
            if latent != self.model.latent {
                return Err(Error::config(format!(
                    "dataset.latent {latent:?} does not match model.latent {:?}",
                    self.model.latent
                )));
            }
        }
        if let Some(c) = self.dataset.classes() {
            if c != self.model.num_classes {
                return Err(Error::config(format!(
                    "dataset.classes = {c} does not match model.num_classes = {}",
                    self.model.num_classes
                )));
            }
        }
        if let Some(a) = &self.analyze {
            for m in &a.models {
                if MpditConfig::preset(m).is_none() {
                    return Err(Error::config(format!("analyze.models: unknown preset `{m}`")));
                }
            }
        }
        Ok(())
    }

    /// Canonical text: keys sorted, every default written out.
    pub fn canonical(&self) -> String {
        let value = toml::Value::try_from(self).expect("run config serializes");
        toml::to_string(&sort(value)).expect("run config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Dotted names of fields that differ from `other` and must match for a
    /// resume.
    pub fn resume_mismatches(&self, other: &RunConfig) -> Vec<String> {
        let (a, b) = (flatten(self), flatten(other));
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| !RESUMABLE.iter().any(|r| k.as_str() == *r || (r.ends_with('.') && k.starts_with(r))))
            .filter(|k| a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }
}

fn sort(v: toml::Value) -> toml::Value {
    match v {
        toml::Value::Table(t) => {
            let sorted: BTreeMap<String, toml::Value> = t.into_iter().map(|(k, v)| (k, sort(v))).collect();
            toml::Value::Table(sorted.into_iter().collect())
        }
        toml::Value::Array(a) => toml::Value::Array(a.into_iter().map(sort).collect()),
        other => other,
    }
}

fn flatten(run: &RunConfig) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", &toml::Value::try_from(run).expect("run config serializes"), &mut out);
    out
}
