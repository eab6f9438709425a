//! Versioned binary checkpoint container.
//!
//! Layout: magic `BOOD`, format version (u32 LE), metadata length (u64 LE),
//! a JSON metadata block (config, tensor names and shapes, optimizer
//! hyperparameters), then every tensor payload as raw little-endian f64 in
//! the declared order. Tensor bits survive a save/load cycle exactly.

use std::path::Path;

use brainood_core::adam::AdamState;
use brainood_core::model::ModelParams;
use brainood_core::tensor::Tensor;
use brainood_core::trainer::{Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};

use super::{file_err, format_err, write_atomic, IoError};

const MAGIC: &[u8; 4] = b"BOOD";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    n: usize,
    classes: usize,
    epoch: usize,
    val_accuracy: f64,
    config: TrainConfig,
    adam: AdamMeta,
    tensors: Vec<TensorEntry>,
}

/// Named tensors in payload order: model parameters, running statistics,
/// then Adam first and second moments.
fn tensor_list(params: &ModelParams, adam: &AdamState) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in params.visit() {
        out.push((name, t.clone()));
    }
    for (name, t) in params.stats() {
        out.push((name, t.clone()));
    }
    let (m, v) = adam.slots();
    for (k, t) in m.iter().enumerate() {
        out.push((format!("adam.m.{k}"), t.clone()));
    }
    for (k, t) in v.iter().enumerate() {
        out.push((format!("adam.v.{k}"), t.clone()));
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let tensors = tensor_list(&ckpt.params, &ckpt.adam);
    let meta = CheckpointMeta {
        format_version: ckpt.format_version,
        n: ckpt.params.n,
        classes: ckpt.params.classes,
        epoch: ckpt.epoch,
        val_accuracy: ckpt.val_accuracy,
        config: ckpt.config.clone(),
        adam: AdamMeta {
            lr: ckpt.adam.lr,
            beta1: ckpt.adam.beta1,
            beta2: ckpt.adam.beta2,
            eps: ckpt.adam.eps,
            step: ckpt.adam.step_count(),
        },
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta).map_err(|e| format_err(path, e.to_string()))?;

    let payload_len: usize = tensors.iter().map(|(_, t)| t.data().len() * 8).sum();
    let mut bytes = Vec::with_capacity(16 + meta_bytes.len() + payload_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&ckpt.format_version.to_le_bytes());
    bytes.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_bytes);
    for (_, t) in &tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str, path: &Path) -> Result<&'a [u8], IoError> {
        if self.pos + len > self.bytes.len() {
            return Err(format_err(
                path,
                format!("truncated while reading {what} (offset {})", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic", path)? != MAGIC {
        return Err(format_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version", path)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format_err(
            path,
            format!("format version {version} (this build reads {CHECKPOINT_VERSION})"),
        ));
    }
    let meta_len = u64::from_le_bytes(r.take(8, "metadata length", path)?.try_into().unwrap());
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len as usize, "metadata", path)?)
            .map_err(|e| format_err(path, format!("metadata: {e}")))?;
    meta.config
        .check()
        .map_err(|e| format_err(path, format!("stored config: {e}")))?;

    // The flag set in the stored config determines which tensors exist;
    // rebuilding from it and demanding an exact name/shape match catches
    // both corrupted files and incompatible builds.
    let mut params = ModelParams::init(meta.n, meta.classes, &meta.config);
    let visit_shapes: Vec<(usize, usize)> =
        params.visit().iter().map(|(_, t)| t.shape()).collect();
    let mut expected: Vec<(String, usize, usize)> = Vec::new();
    for (name, t) in params.visit() {
        expected.push((name, t.rows(), t.cols()));
    }
    for (name, t) in params.stats() {
        expected.push((name, t.rows(), t.cols()));
    }
    for moment in ["m", "v"] {
        for (k, &(rows, cols)) in visit_shapes.iter().enumerate() {
            expected.push((format!("adam.{moment}.{k}"), rows, cols));
        }
    }
    if meta.tensors.len() != expected.len() {
        return Err(format_err(
            path,
            format!(
                "tensor inventory mismatch: file declares {}, this config needs {}",
                meta.tensors.len(),
                expected.len()
            ),
        ));
    }
    for (entry, (name, rows, cols)) in meta.tensors.iter().zip(&expected) {
        if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
            return Err(format_err(
                path,
                format!(
                    "tensor mismatch: file has '{}' {}x{}, expected '{}' {}x{}",
                    entry.name, entry.rows, entry.cols, name, rows, cols
                ),
            ));
        }
    }

    let read_tensor = |r: &mut Reader<'_>, rows: usize, cols: usize, name: &str| {
        let raw = r.take(rows * cols * 8, name, path)?;
        let mut t = Tensor::zeros(rows, cols);
        for (slot, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok::<Tensor, IoError>(t)
    };

    let mut loaded: Vec<Tensor> = Vec::with_capacity(expected.len());
    for (name, rows, cols) in &expected {
        loaded.push(read_tensor(&mut r, *rows, *cols, name)?);
    }
    if r.pos != bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes after payloads", bytes.len() - r.pos),
        ));
    }

    let mut it = loaded.into_iter();
    for slot in params.visit_mut() {
        *slot = it.next().expect("inventory length checked");
    }
    for slot in params.stats_mut() {
        *slot = it.next().expect("inventory length checked");
    }
    let m: Vec<Tensor> = (&mut it).take(visit_shapes.len()).collect();
    let v: Vec<Tensor> = it.collect();
    let adam = AdamState::from_parts(
        meta.adam.lr,
        meta.adam.beta1,
        meta.adam.beta2,
        meta.adam.eps,
        meta.adam.step,
        m,
        v,
    )
    .map_err(|e| format_err(path, e))?;

    Ok(Checkpoint {
        format_version: meta.format_version,
        config: meta.config,
        params,
        adam,
        epoch: meta.epoch,
        val_accuracy: meta.val_accuracy,
    })
}
