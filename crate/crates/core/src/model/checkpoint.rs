//! Checkpoint directory: `manifest.json` describing every tensor plus a
//! single little-endian blob `params.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, Parameter};
use crate::tensor::{Real, RunningStats, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "simbase-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} values, expected {expected}")]
    Dtype { expected: String, found: String },
    #[error("blob is {found} bytes, manifest declares {expected}")]
    BlobSize { expected: u64, found: u64 },
    #[error("blob checksum mismatch: manifest {expected:#010x}, computed {found:#010x}")]
    Checksum { expected: u32, found: u32 },
    #[error("tensor {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} is missing from the checkpoint")]
    Missing(String),
    #[error("tensor {name} spans bytes {offset}..{end}, outside the blob")]
    Range { name: String, offset: u64, end: u64 },
    #[error("embedded model config is invalid: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// One flag per pyramid batch norm layer.
    pub bn_initialized: Vec<bool>,
    pub blob_bytes: u64,
    pub blob_crc32: u32,
}

fn running_names(block_index: usize) -> [String; 2] {
    let p = block_index + 2;
    [
        format!("pyramid.block{p}.bn.running_mean"),
        format!("pyramid.block{p}.bn.running_var"),
    ]
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `dir/manifest.json` and `dir/params.bin`, creating `dir`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, dir: &Path) -> Result<Manifest, CheckpointError> {
    let width = std::mem::size_of::<T>() as u64;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
        let offset = blob.len() as u64;
        data.iter().for_each(|v| v.write_le(&mut blob));
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
            nbytes: data.len() as u64 * width,
        });
    };
    for p in model.params() {
        push(p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data());
    }
    for (i, stats) in model.running_stats().iter().enumerate() {
        let [mean, var] = running_names(i);
        push(mean, vec![stats.channels()], &stats.mean);
        push(var, vec![stats.channels()], &stats.var);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        config: model.config().clone(),
        tensors,
        bn_initialized: model.running_stats().iter().map(|s| s.initialized).collect(),
        blob_bytes: blob.len() as u64,
        blob_crc32: crc32fast::hash(&blob),
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io(&blob_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io(&manifest_path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Manifest(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save_checkpoint`] with the same precision.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Model<T>, CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            expected: T::DTYPE.into(),
            found: manifest.dtype,
        });
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io(&blob_path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CheckpointError::BlobSize {
            expected: manifest.blob_bytes,
            found: blob.len() as u64,
        });
    }
    let crc = crc32fast::hash(&blob);
    if crc != manifest.blob_crc32 {
        return Err(CheckpointError::Checksum {
            expected: manifest.blob_crc32,
            found: crc,
        });
    }

    // A template model fixes the expected names and shapes.
    let template = Model::<T>::new(manifest.config.clone()).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let width = std::mem::size_of::<T>();
    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>, CheckpointError> {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if entry.shape != shape {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: entry.shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + (n * width) as u64;
        if entry.nbytes != (n * width) as u64 || end > blob.len() as u64 {
            return Err(CheckpointError::Range {
                name: name.to_string(),
                offset: entry.offset,
                end,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        Ok(bytes.chunks_exact(width).map(T::read_le).collect())
    };

    let mut params = Vec::with_capacity(template.params().len());
    for p in template.params() {
        let data = fetch(&p.name, p.tensor.shape())?;
        let tensor = Tensor::new(p.tensor.shape().to_vec(), data)
            .expect("length checked against shape")
            .with_requires_grad(true);
        params.push(Parameter {
            name: p.name.clone(),
            tensor,
        });
    }
    let blocks = template.running_stats().len();
    if manifest.bn_initialized.len() != blocks {
        return Err(CheckpointError::Manifest(format!(
            "{} batch norm flags for {blocks} layers",
            manifest.bn_initialized.len()
        )));
    }
    let ch = manifest.config.d_hidden;
    let mut running = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let [mean, var] = running_names(i);
        running.push(RunningStats {
            mean: fetch(&mean, &[ch])?,
            var: fetch(&var, &[ch])?,
            initialized: manifest.bn_initialized[i],
        });
    }
    Model::assemble(manifest.config, params, Some(running)).map_err(|e| CheckpointError::Config(e.to_string()))
}
