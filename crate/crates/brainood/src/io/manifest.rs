//! Dataset manifests (JSON) with per-subject connectivity matrices (CSV,
//! n x n, decimal notation, no header), and split-plan files.

use std::path::{Path, PathBuf};

use brainood_core::braindata::{
    BrainNetwork, ConnectivityMatrix, Dataset, DatasetManifest, SplitPlan, SyntheticDataset,
};
use brainood_core::tensor::Tensor;

use super::{file_err, format_err, load_json, save_json, write_atomic, IoError};

/// Render a matrix as CSV. `{}` on f64 prints the shortest decimal that
/// parses back to the same bits, so a write/read cycle is lossless.
pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m.get(i, j)));
        }
        out.push('\n');
    }
    out
}

fn matrix_from_csv(text: &str, n: usize, subject: &str, path: &Path) -> Result<Tensor, IoError> {
    let merr = |detail: String| IoError::Matrix {
        subject: subject.to_string(),
        path: path.display().to_string(),
        detail,
    };
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n {
        return Err(merr(format!("expected {n} rows, found {}", rows.len())));
    }
    let mut m = Tensor::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != n {
            return Err(merr(format!(
                "row {i}: expected {n} columns, found {}",
                cells.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| merr(format!("row {i}, column {j}: '{cell}' is not a number")))?;
            m.set(i, j, v);
        }
    }
    Ok(m)
}

/// Write a generated dataset: matrices under `matrices/` next to the
/// manifest, then the manifest itself (so a visible manifest implies its
/// matrices exist). Byte-identical across reruns of the same generator
/// config.
pub fn save_synthetic(manifest_path: &Path, data: &SyntheticDataset) -> Result<(), IoError> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut manifest = data.manifest.clone();
    for (entry, matrix) in manifest.entries.iter_mut().zip(&data.matrices) {
        let rel = format!("matrices/{}.csv", entry.subject_id);
        write_atomic(&dir.join(&rel), matrix_to_csv(matrix).as_bytes())?;
        entry.matrix_path = rel;
    }
    save_json(manifest_path, &manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let manifest: DatasetManifest = load_json(path)?;
    manifest.check()?;
    Ok(manifest)
}

/// Load a manifest and every matrix it references; validate and sparsify
/// into the in-memory dataset. Matrix paths resolve relative to the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path, sparsify_fraction: f64) -> Result<Dataset, IoError> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut networks = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mpath = dir.join(&entry.matrix_path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| file_err(&mpath, e))?;
        let raw = matrix_from_csv(&text, manifest.n, &entry.subject_id, &mpath)?;
        let validated = ConnectivityMatrix::validate(raw)?;
        networks.push(BrainNetwork::from_matrix(
            entry.subject_id.clone(),
            entry.site.clone(),
            entry.label,
            validated,
            sparsify_fraction,
        )?);
    }
    Ok(Dataset {
        n: manifest.n,
        class_names: manifest.class_names,
        networks,
        ground_truth_edges: manifest
            .ground_truth_edges
            .map(|es| es.into_iter().map(|[i, j]| (i, j)).collect()),
        node_groups: manifest.node_group_labels,
    })
}

pub fn save_split_plan(path: &Path, plan: &SplitPlan) -> Result<(), IoError> {
    save_json(path, plan)
}

pub fn load_split_plan(path: &Path) -> Result<SplitPlan, IoError> {
    let plan: SplitPlan = load_json(path)?;
    if plan.folds.is_empty() {
        return Err(format_err(path, "split plan has no folds"));
    }
    Ok(plan)
}

/// Build the default path for a split-plan file next to a manifest.
pub fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(name)
}
