//! Run configuration: a TOML file with dotted-key overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use promptcount::benchmark::Protocol;
use promptcount::evaluation::Interpolation;
use promptcount::model::ModelConfig;
use promptcount::pipeline::PipelineConfig;
use promptcount::synth::{sha256_hex, DatasetConfig, Split};
use promptcount::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const HOME_VAR: &str = "PROMPTCOUNT_HOME";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub split: Split,
    /// Pick the count threshold on this split before evaluating.
    pub calibrate_on: Option<Split>,
    pub interpolation: Interpolation,
    pub jobs: usize,
    pub checkpoint: Option<PathBuf>,
    /// Write a count scatter and a precision-recall curve.
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::Few,
            split: Split::Test,
            calibrate_on: Some(Split::Val),
            interpolation: Interpolation::AllPoint,
            jobs: 1,
            checkpoint: None,
            plots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root, relative paths resolved against the output root.
    pub dataset: PathBuf,
    /// Only "oracle" is built in.
    pub backend: String,
    /// Only "toy" is built in.
    pub embedder: String,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            backend: "oracle".into(),
            embedder: "toy".into(),
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = toml::Value::try_from(RunConfig::default())?;
        if let Some(f) = file {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading config {}", f.display()))?;
            let user: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", f.display()))?;
            merge(&mut value, user);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend != "oracle" {
            bail!("unknown backend {:?}; available: oracle", self.backend);
        }
        if self.embedder != "toy" {
            bail!("unknown embedder {:?}; available: toy", self.embedder);
        }
        if self.eval.jobs == 0 {
            bail!("eval.jobs must be at least 1");
        }
        self.model.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// Output root: `$PROMPTCOUNT_HOME`, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(HOME_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Apply `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur.as_table_mut().with_context(|| format!("override {key:?}: {p:?} is not a section"))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}
