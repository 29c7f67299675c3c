//! Model checkpoints: a JSON manifest plus one tensor blob per parameter.
//!
//! Layout under the checkpoint directory:
//!   manifest.json
//!   tensors/<param-key>.stns     e.g. tensors/stage1.block1.conv1.weight.stns
//!
//! The manifest stores the builder config rather than the expanded layer
//! list, so loading rebuilds the graph and then overwrites its parameters.
//! Serialization is canonical: loading and immediately resaving reproduces
//! every byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_mini_resnet, MiniResnetCfg, ModelGraph};
use crate::stns;
use crate::tensor::Element;

pub const MODEL_FORMAT: &str = "model-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub architecture: MiniResnetCfg,
    pub init_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingMeta {
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

/// Serialize as canonical JSON: two-space indent, fixed field order,
/// trailing newline. Re-serializing a loaded value is byte-identical.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::config(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn tensor_dir(dir: &Path) -> PathBuf {
    dir.join("tensors")
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Write a model checkpoint. Parameter order in the manifest follows the
/// sorted parameter map, and each blob is listed exactly once.
pub fn save_model<T: Element>(
    dir: &Path,
    model: &ModelGraph<T>,
    architecture: &MiniResnetCfg,
    init_seed: u64,
    training: Option<TrainingMeta>,
) -> Result<()> {
    fs::create_dir_all(tensor_dir(dir))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    for (key, value) in &model.params {
        let file = format!("tensors/{key}.stns");
        stns::write_file(&dir.join(&file), value)?;
        tensors.push(TensorEntry {
            name: key.clone(),
            file,
            shape: value.shape().to_vec(),
        });
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        architecture: architecture.clone(),
        init_seed,
        training,
        tensors,
    };
    write_json(&manifest_path(dir), &manifest)
}

/// Load a checkpoint, rebuilding the graph from its stored config.
pub fn load_model<T: Element>(dir: &Path) -> Result<(ModelGraph<T>, ModelManifest)> {
    let mpath = manifest_path(dir);
    if !mpath.is_file() {
        return Err(Error::config(format!(
            "no checkpoint at {} (missing manifest.json)",
            dir.display()
        )));
    }
    let manifest: ModelManifest = read_json(&mpath)?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::format(format!(
            "expected a {MODEL_FORMAT} manifest, found {:?}",
            manifest.format
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.dtype != T::DTYPE.to_string() {
        return Err(Error::format(format!(
            "checkpoint stores {} tensors, caller wants {}",
            manifest.dtype,
            T::DTYPE
        )));
    }

    let mut model = build_mini_resnet::<T>(&manifest.architecture, manifest.init_seed)?;
    let expected: Vec<&String> = model.params.keys().collect();
    let listed: Vec<&String> = manifest.tensors.iter().map(|t| &t.name).collect();
    if expected != listed {
        return Err(Error::format(format!(
            "manifest parameters do not match the architecture: expected {} entries, found {}",
            expected.len(),
            listed.len()
        )));
    }
    for entry in &manifest.tensors {
        let t = stns::read_file::<T>(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(format!(
                "{}: blob shape {:?} does not match manifest {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        let current = &model.params[&entry.name];
        if current.shape() != t.shape() {
            return Err(Error::format(format!(
                "{}: shape {:?} does not fit the architecture (wants {:?})",
                entry.name,
                t.shape(),
                current.shape()
            )));
        }
        model.set_param(&entry.name, t);
    }
    Ok((model, manifest))
}
