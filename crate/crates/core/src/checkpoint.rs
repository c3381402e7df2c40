//! On-disk parameter checkpoints: a JSON manifest plus one little-endian
//! f64 blob per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{AdamState, ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// First and second Adam moments, present when saved mid-training.
    pub adam_m: Option<Vec<TensorEntry>>,
    pub adam_v: Option<Vec<TensorEntry>>,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub adam: Option<AdamState>,
}

fn write_blob(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != len * 8 {
        return Err(Error::Checkpoint(format!("{}: expected {} bytes, found {}", path.display(), len * 8, bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn save_set(dir: &Path, sub: &str, set: &ParamSet) -> Result<Vec<TensorEntry>> {
    let d = dir.join(sub);
    fs::create_dir_all(&d)?;
    let mut out = Vec::new();
    for t in &set.tensors {
        let file = format!("{sub}/{}.bin", t.name);
        write_blob(&dir.join(&file), &t.data)?;
        out.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), dtype: "f64".into(), file });
    }
    Ok(out)
}

fn load_set(dir: &Path, entries: &[TensorEntry]) -> Result<ParamSet> {
    let mut set = ParamSet::default();
    for e in entries {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let len = e.shape.iter().product();
        let data = read_blob(&dir.join(&e.file), len)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {}", e.name)));
        }
        set.tensors.push(Tensor { name: e.name.clone(), shape: e.shape.clone(), data });
    }
    Ok(set)
}

/// Write `model` (and optionally the optimizer state) into `dir`.
pub fn save(dir: &Path, model: &Model, adam: Option<&AdamState>, seed: u64, config_hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let tensors = save_set(dir, "tensors", &model.params)?;
    let (adam_m, adam_v, step) = match adam {
        Some(a) => (Some(save_set(dir, "adam_m", &a.m)?), Some(save_set(dir, "adam_v", &a.v)?), a.step),
        None => (None, None, 0),
    };
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        seed,
        step,
        config_hash: config_hash.to_string(),
        model: model.config.clone(),
        tensors,
        adam_m,
        adam_v,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let params = load_set(dir, &manifest.tensors)?;
    let model = Model::from_params(manifest.model.clone(), params)?;
    let adam = match (&manifest.adam_m, &manifest.adam_v) {
        (Some(m), Some(v)) => Some(AdamState { step: manifest.step, m: load_set(dir, m)?, v: load_set(dir, v)? }),
        _ => None,
    };
    Ok(Checkpoint { manifest, model, adam })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let mut adam = AdamState::new(&model.params);
        adam.step = 5;
        adam.m.tensors[0].data[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, Some(&adam), 3, "abc").unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.model.params, model.params);
        assert_eq!(ck.adam.unwrap(), adam);
        assert_eq!(ck.manifest.config_hash, "abc");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, None, 1, "").unwrap();
        fs::write(dir.path().join("tensors/enc.0.bias.bin"), [0u8; 3]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
