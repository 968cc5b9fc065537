//! Named parameter tensors with gradient slots, initialization, and the
//! on-disk checkpoint container.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Mat};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    grads: Vec<Mat<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.grads.push(Mat::zeros(value.rows, value.cols));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Mat<T> {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.grads[id.0]
    }

    /// Simultaneous mutable value and shared gradient access for optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Mat<T>, &Mat<T>) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            grads: self.grads.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Sum of squared gradient entries over parameters whose name starts with `prefix`.
    pub fn grad_mass(&self, prefix: &str) -> f64 {
        self.ids()
            .filter(|id| self.name(*id).starts_with(prefix))
            .map(|id| {
                self.grad(id)
                    .data
                    .iter()
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Truncated normal (±2σ) initializer.
pub fn trunc_normal<T: Float, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Mat<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` plus a little-endian f32 blob into `dir`.
///
/// `metadata` travels alongside the tensors (model configuration, epoch, ...).
pub fn save_checkpoint<T: Float>(
    store: &ParamStore<T>,
    metadata: serde_json::Value,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut offset = 0usize;
    for id in store.ids() {
        let value = store.value(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_owned(),
            shape: [value.rows, value.cols],
            dtype: "f32".into(),
            offset,
        });
        for v in &value.data {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += value.len();
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        metadata,
        tensors,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let mut f = fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

/// Reads the checkpoint metadata without touching tensor data.
pub fn read_checkpoint_metadata(dir: &Path) -> Result<serde_json::Value> {
    Ok(read_manifest(dir)?.metadata)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} unsupported (expected {})",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    Ok(manifest)
}

/// Loads tensor values into an already-constructed store. Every parameter of
/// `store` must be present with a matching shape.
pub fn load_checkpoint_into<T: Float>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&blob_path, e))?;
    let by_name: HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("tensor {name}: dtype {}", entry.dtype)));
        }
        let value = store.value_mut(id);
        if entry.shape != [value.rows, value.cols] {
            return Err(Error::Shape(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                entry.shape,
                value.shape()
            )));
        }
        let start = entry.offset * 4;
        let end = start + value.len() * 4;
        if end > bytes.len() {
            return Err(Error::Format(format!("tensor {name} runs past blob end")));
        }
        for (dst, chunk) in value.data.iter_mut().zip(bytes[start..end].chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            *dst = T::lit(v as f64);
        }
    }
    Ok(())
}
