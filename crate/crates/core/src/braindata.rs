//! Connectivity-matrix ingestion, graph construction, site-holdout splits,
//! and a synthetic multi-site generator with planted causal structure.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::rng::{derive_seed, tags, DetRng};
use crate::tensor::Tensor;

/// Fraction of strongest connections kept when building a binary adjacency.
pub const SPARSIFY_FRACTION: f64 = 0.2;

/// Data-layer errors. Everything names the offending subject/cell/field so
/// the CLI can surface it verbatim.
#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    NotSquare {
        rows: usize,
        cols: usize,
    },
    DimensionMismatch {
        subject: String,
        expected: usize,
        got: usize,
    },
    Asymmetric {
        cell: (usize, usize),
        delta: f64,
    },
    OutOfRange {
        cell: (usize, usize),
        value: f64,
    },
    BadDiagonal {
        index: usize,
        value: f64,
    },
    BadFraction {
        value: f64,
    },
    EmptyDataset,
    DuplicateSubject {
        id: String,
    },
    UnknownSubject {
        id: String,
    },
    UnknownSite {
        site: String,
    },
    LabelOutOfRange {
        subject: String,
        label: usize,
        classes: usize,
    },
    /// The held-out site is too large for the requested split ratio.
    RatioUnattainable {
        site: String,
        ood_count: usize,
        total: usize,
        val_target: usize,
        test_target: usize,
    },
    PatternOverflow {
        needed: usize,
        available: usize,
    },
    BadConfig {
        field: &'static str,
        detail: String,
    },
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::NotSquare { rows, cols } => {
                write!(f, "matrix is {rows}x{cols}, expected square")
            }
            DataError::DimensionMismatch {
                subject,
                expected,
                got,
            } => write!(
                f,
                "subject {subject}: matrix is {got}x{got}, manifest declares n={expected}"
            ),
            DataError::Asymmetric { cell: (i, j), delta } => write!(
                f,
                "asymmetric at ({i},{j}): |S[i,j]-S[j,i]| = {delta:e} exceeds 1e-9"
            ),
            DataError::OutOfRange { cell: (i, j), value } => {
                write!(f, "entry ({i},{j}) = {value} outside [-1, 1]")
            }
            DataError::BadDiagonal { index, value } => {
                write!(f, "diagonal entry ({index},{index}) = {value}, expected 1")
            }
            DataError::BadFraction { value } => {
                write!(f, "sparsify fraction {value} outside (0, 1]")
            }
            DataError::EmptyDataset => write!(f, "empty dataset"),
            DataError::DuplicateSubject { id } => write!(f, "duplicate subject id {id:?}"),
            DataError::UnknownSubject { id } => write!(f, "unknown subject id {id:?}"),
            DataError::UnknownSite { site } => write!(f, "unknown site {site:?}"),
            DataError::LabelOutOfRange {
                subject,
                label,
                classes,
            } => write!(
                f,
                "subject {subject}: label {label} out of range for {classes} classes"
            ),
            DataError::RatioUnattainable {
                site,
                ood_count,
                total,
                val_target,
                test_target,
            } => write!(
                f,
                "site {site:?} holds {ood_count} of {total} subjects; its val/test halves \
                 ({}/{}) exceed the ratio targets val={val_target}, test={test_target}; \
                 best achievable split with this site held out is {}:{}:{}",
                ood_count / 2,
                ood_count - ood_count / 2,
                total - ood_count,
                ood_count / 2,
                ood_count - ood_count / 2,
            ),
            DataError::PatternOverflow { needed, available } => write!(
                f,
                "causal + site patterns need {needed} node pairs, only {available} exist"
            ),
            DataError::BadConfig { field, detail } => {
                write!(f, "invalid config field {field}: {detail}")
            }
        }
    }
}

impl core::error::Error for DataError {}

/// ceil(fraction · count) computed with a guard against the product landing
/// an ulp above an integer (0.2 · 4950 evaluates to 990.0000000000001).
pub fn ceil_frac(fraction: f64, count: usize) -> usize {
    if count == 0 {
        return 0;
    }
    let k = fmath::ceil(fraction * count as f64 - 1e-9);
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(count)
    }
}

/// A validated symmetric correlation matrix: entries in [−1, 1], unit
/// diagonal, exact symmetry (enforced by averaging after a 1e-9 tolerance
/// check).
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix {
    values: Tensor,
}

impl ConnectivityMatrix {
    pub fn validate(mut raw: Tensor) -> Result<Self, DataError> {
        let (rows, cols) = raw.shape();
        if rows != cols {
            return Err(DataError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            for j in 0..cols {
                let v = raw.get(i, j);
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(DataError::OutOfRange {
                        cell: (i, j),
                        value: v,
                    });
                }
            }
        }
        for i in 0..rows {
            let d = raw.get(i, i);
            if fmath::abs(d - 1.0) > 1e-9 {
                return Err(DataError::BadDiagonal { index: i, value: d });
            }
        }
        for i in 0..rows {
            for j in (i + 1)..cols {
                let a = raw.get(i, j);
                let b = raw.get(j, i);
                let delta = fmath::abs(a - b);
                if delta > 1e-9 {
                    return Err(DataError::Asymmetric {
                        cell: (i, j),
                        delta,
                    });
                }
                let avg = 0.5 * (a + b);
                raw.set(i, j, avg);
                raw.set(j, i, avg);
            }
            raw.set(i, i, 1.0);
        }
        Ok(ConnectivityMatrix { values: raw })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Binary adjacency keeping the `ceil(fraction · n(n−1)/2)` unordered pairs
/// with the highest correlation. Ties at the threshold break lexicographically
/// by (i, j). Output is symmetric with zero diagonal.
pub fn sparsify_top_fraction(s: &ConnectivityMatrix, fraction: f64) -> Result<Tensor, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::BadFraction { value: fraction });
    }
    let n = s.n();
    let pair_count = n * (n - 1) / 2;
    let keep = ceil_frac(fraction, pair_count).max(usize::from(pair_count > 0));
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(pair_count);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    pairs.sort_by(|&pa, &pb| {
        let va = s.values.get(pa.0, pa.1);
        let vb = s.values.get(pb.0, pb.1);
        vb.total_cmp(&va).then(pa.cmp(&pb))
    });
    let mut a = Tensor::zeros(n, n);
    for &(i, j) in pairs.iter().take(keep) {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    Ok(a)
}

/// One subject: feature matrix (the validated connectivity values), binary
/// adjacency, and metadata.
#[derive(Clone, Debug)]
pub struct BrainNetwork {
    pub subject_id: String,
    pub site: String,
    pub label: usize,
    /// Node features: the connectivity matrix itself, one row per node.
    pub x: Tensor,
    /// Binary symmetric adjacency, zero diagonal.
    pub a: Tensor,
    /// Upper-triangular edge list of `a`, lexicographic.
    pub edges: Vec<(usize, usize)>,
}

impl BrainNetwork {
    pub fn from_matrix(
        subject_id: String,
        site: String,
        label: usize,
        matrix: ConnectivityMatrix,
        sparsify_fraction: f64,
    ) -> Result<Self, DataError> {
        let a = sparsify_top_fraction(&matrix, sparsify_fraction)?;
        let n = matrix.n();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if a.get(i, j) != 0.0 {
                    edges.push((i, j));
                }
            }
        }
        Ok(BrainNetwork {
            subject_id,
            site,
            label,
            x: matrix.into_values(),
            a,
            edges,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

/// In-memory dataset: every network shares node count `n`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n: usize,
    pub class_names: Vec<String>,
    pub networks: Vec<BrainNetwork>,
    pub ground_truth_edges: Option<Vec<(usize, usize)>>,
    pub node_groups: Option<Vec<String>>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn index_of(&self, subject_id: &str) -> Option<usize> {
        self.networks
            .iter()
            .position(|s| s.subject_id == subject_id)
    }

    /// Resolve subject ids to dataset indices, erring on the first unknown.
    pub fn indices_for(&self, ids: &[String]) -> Result<Vec<usize>, DataError> {
        ids.iter()
            .map(|id| {
                self.index_of(id).ok_or_else(|| DataError::UnknownSubject {
                    id: id.clone(),
                })
            })
            .collect()
    }

    /// Sorted distinct site names.
    pub fn sites(&self) -> Vec<String> {
        let mut sites: Vec<String> = self.networks.iter().map(|s| s.site.clone()).collect();
        sites.sort();
        sites.dedup();
        sites
    }

    /// (subject_id, site) pairs in dataset order, as consumed by
    /// [`make_splits`].
    pub fn subject_sites(&self) -> Vec<(String, String)> {
        self.networks
            .iter()
            .map(|s| (s.subject_id.clone(), s.site.clone()))
            .collect()
    }
}

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub matrix_path: String,
    pub label: usize,
    pub site: String,
}

/// On-disk dataset index. `matrix_path` entries are relative to the manifest
/// file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_edges: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_group_labels: Option<Vec<String>>,
}

impl DatasetManifest {
    /// Structural checks that need no matrix files: non-empty, unique ids,
    /// labels within range, non-empty site strings.
    pub fn check(&self) -> Result<(), DataError> {
        if self.entries.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.subject_id.as_str()).collect();
        ids.sort_unstable();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(DataError::DuplicateSubject {
                    id: w[0].to_string(),
                });
            }
        }
        for e in &self.entries {
            if e.label >= self.class_names.len() {
                return Err(DataError::LabelOutOfRange {
                    subject: e.subject_id.clone(),
                    label: e.label,
                    classes: self.class_names.len(),
                });
            }
            if e.site.is_empty() {
                return Err(DataError::BadConfig {
                    field: "site",
                    detail: format!("subject {} has an empty site string", e.subject_id),
                });
            }
        }
        Ok(())
    }

    pub fn subject_sites(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|e| (e.subject_id.clone(), e.site.clone()))
            .collect()
    }
}

/// One cross-validation fold. Id lists are sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFold {
    pub fold: usize,
    pub ood_site: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<SplitFold>,
}

/// Site-holdout split generation. Per fold: every subject of the held-out
/// site leaves the train pool and lands half in val, half in test (odd
/// remainder to test); the rest are shuffled by a fold-derived seed and
/// topped up to the global ratio (floor for val and test, remainder to
/// train).
pub fn make_splits(
    subjects: &[(String, String)],
    ood_sites: &[String],
    ratio: (usize, usize, usize),
    seed: u64,
) -> Result<SplitPlan, DataError> {
    if subjects.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let denom = ratio.0 + ratio.1 + ratio.2;
    if denom == 0 || ratio.0 == 0 {
        return Err(DataError::BadConfig {
            field: "ratio",
            detail: format!("ratio {}:{}:{} is degenerate", ratio.0, ratio.1, ratio.2),
        });
    }
    let total = subjects.len();
    let val_target = total * ratio.1 / denom;
    let test_target = total * ratio.2 / denom;

    let mut folds = Vec::with_capacity(ood_sites.len());
    for (fold, site) in ood_sites.iter().enumerate() {
        let ood: Vec<&String> = subjects
            .iter()
            .filter(|(_, s)| s == site)
            .map(|(id, _)| id)
            .collect();
        if ood.is_empty() {
            return Err(DataError::UnknownSite { site: site.clone() });
        }
        let ood_val_count = ood.len() / 2;
        let ood_test_count = ood.len() - ood_val_count;
        if ood_val_count > val_target || ood_test_count > test_target {
            return Err(DataError::RatioUnattainable {
                site: site.clone(),
                ood_count: ood.len(),
                total,
                val_target,
                test_target,
            });
        }

        let mut val_ids: Vec<String> = ood[..ood_val_count].iter().map(|s| (*s).clone()).collect();
        let mut test_ids: Vec<String> = ood[ood_val_count..].iter().map(|s| (*s).clone()).collect();

        let mut pool: Vec<&String> = subjects
            .iter()
            .filter(|(_, s)| s != site)
            .map(|(id, _)| id)
            .collect();
        let mut rng = DetRng::new(derive_seed(seed, &[tags::SPLIT, fold as u64]));
        rng.shuffle(&mut pool);

        let need_val = val_target - ood_val_count;
        let need_test = test_target - ood_test_count;
        val_ids.extend(pool[..need_val].iter().map(|s| (*s).clone()));
        test_ids.extend(pool[need_val..need_val + need_test].iter().map(|s| (*s).clone()));
        let mut train_ids: Vec<String> = pool[need_val + need_test..]
            .iter()
            .map(|s| (*s).clone())
            .collect();

        train_ids.sort();
        val_ids.sort();
        test_ids.sort();
        folds.push(SplitFold {
            fold,
            ood_site: site.clone(),
            train_ids,
            val_ids,
            test_ids,
        });
    }
    Ok(SplitPlan { folds })
}

/// Synthetic multi-site generator configuration. Deserializing fills
/// missing fields from the defaults and rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub sites: usize,
    pub subjects_per_site: usize,
    pub classes: usize,
    /// Fraction of unordered node pairs planted as the causal pattern; each
    /// site's bias pattern has the same size.
    pub causal_edge_fraction: f64,
    pub causal_strength: f64,
    pub site_bias_strength: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 32,
            sites: 4,
            subjects_per_site: 50,
            classes: 2,
            causal_edge_fraction: 0.1,
            causal_strength: 0.4,
            site_bias_strength: 0.3,
            noise_level: 0.2,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn check(&self) -> Result<(), DataError> {
        let bad = |field: &'static str, detail: String| DataError::BadConfig { field, detail };
        if self.n < 4 {
            return Err(bad("n", format!("{} < 4", self.n)));
        }
        if self.sites == 0 || self.subjects_per_site == 0 {
            return Err(bad("sites", "need at least one site and one subject".into()));
        }
        if self.classes < 2 {
            return Err(bad("classes", format!("{} < 2", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.causal_edge_fraction) {
            return Err(bad(
                "causal_edge_fraction",
                format!("{} outside [0, 1]", self.causal_edge_fraction),
            ));
        }
        for (field, v) in [
            ("causal_strength", self.causal_strength),
            ("site_bias_strength", self.site_bias_strength),
            ("noise_level", self.noise_level),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(field, format!("{v} must be a finite non-negative value")));
            }
        }
        Ok(())
    }
}

/// Amplitude of the shared background connectivity pattern. Chosen so that
/// background + one planted pattern stays inside [−1, 1] at the default
/// strengths (0.6 + 0.4 = 1.0): without observation noise no clipping
/// occurs and planted group differences survive exactly.
pub const BASE_AMPLITUDE: f64 = 0.6;

/// A generated dataset: manifest plus matrices aligned with its entries.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub matrices: Vec<Tensor>,
}

impl SyntheticDataset {
    /// Validate and sparsify into the in-memory form used by the trainer.
    pub fn into_dataset(self, sparsify_fraction: f64) -> Result<Dataset, DataError> {
        let mut networks = Vec::with_capacity(self.matrices.len());
        for (entry, raw) in self.manifest.entries.iter().zip(self.matrices) {
            let m = ConnectivityMatrix::validate(raw)?;
            networks.push(BrainNetwork::from_matrix(
                entry.subject_id.clone(),
                entry.site.clone(),
                entry.label,
                m,
                sparsify_fraction,
            )?);
        }
        Ok(Dataset {
            n: self.manifest.n,
            class_names: self.manifest.class_names,
            networks,
            ground_truth_edges: self
                .manifest
                .ground_truth_edges
                .map(|es| es.into_iter().map(|[i, j]| (i, j)).collect()),
            node_groups: self.manifest.node_group_labels,
        })
    }
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Generate a multi-site dataset with a planted causal pattern.
///
/// Construction per subject, per unordered pair (i, j):
/// S = clip(base + label_coeff·causal_strength·1[(i,j) ∈ E_c]
///          + site_bias_strength·1[(i,j) ∈ E_site] + N(0, noise_level²), −1, 1)
/// where `base` is one shared background matrix (uniform in ±BASE_AMPLITUDE),
/// E_c is the causal pair set, the per-site bias sets are pairwise disjoint
/// from each other and from E_c, and label_coeff spreads classes evenly over
/// [−1, 1]. Labels alternate over subjects, so every site is class-balanced.
/// A pure function of the config (seed included).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset, DataError> {
    cfg.check()?;
    let n = cfg.n;
    let pairs = all_pairs(n);
    let pattern_size = ceil_frac(cfg.causal_edge_fraction, pairs.len());
    let needed = pattern_size * (cfg.sites + 1);
    if needed > pairs.len() {
        return Err(DataError::PatternOverflow {
            needed,
            available: pairs.len(),
        });
    }

    // Pattern pair sets: first block causal, then one block per site.
    let mut pattern_rng = DetRng::new(derive_seed(cfg.seed, &[tags::SYNTH, 0]));
    let chosen = pattern_rng.sample_indices(pairs.len(), needed);
    let mut causal: Vec<(usize, usize)> = chosen[..pattern_size]
        .iter()
        .map(|&p| pairs[p])
        .collect();
    causal.sort_unstable();
    let mut site_patterns: Vec<Vec<(usize, usize)>> = Vec::with_capacity(cfg.sites);
    for s in 0..cfg.sites {
        let block = &chosen[pattern_size * (s + 1)..pattern_size * (s + 2)];
        let mut set: Vec<(usize, usize)> = block.iter().map(|&p| pairs[p]).collect();
        set.sort_unstable();
        site_patterns.push(set);
    }

    // Shared background pattern.
    let mut base_rng = DetRng::new(derive_seed(cfg.seed, &[tags::SYNTH, 1]));
    let mut base = Tensor::zeros(n, n);
    for &(i, j) in &pairs {
        let v = base_rng.range(-BASE_AMPLITUDE, BASE_AMPLITUDE);
        base.set(i, j, v);
        base.set(j, i, v);
    }

    let class_names: Vec<String> = (0..cfg.classes).map(|c| format!("class{c}")).collect();
    let mut entries = Vec::new();
    let mut matrices = Vec::new();
    let mut global = 0u64;
    for s in 0..cfg.sites {
        let site_name = format!("site{s:02}");
        for i in 0..cfg.subjects_per_site {
            let label = (global as usize) % cfg.classes;
            let label_coeff = -1.0 + 2.0 * label as f64 / (cfg.classes - 1) as f64;
            let subject_id = format!("{site_name}_sub{i:03}");

            let mut m = base.clone();
            for &(a, b) in &causal {
                let v = m.get(a, b) + label_coeff * cfg.causal_strength;
                m.set(a, b, v);
                m.set(b, a, v);
            }
            for &(a, b) in &site_patterns[s] {
                let v = m.get(a, b) + cfg.site_bias_strength;
                m.set(a, b, v);
                m.set(b, a, v);
            }
            let mut noise_rng = DetRng::new(derive_seed(cfg.seed, &[tags::SYNTH, 2, global]));
            for &(a, b) in &pairs {
                let v = (m.get(a, b) + cfg.noise_level * noise_rng.normal()).clamp(-1.0, 1.0);
                m.set(a, b, v);
                m.set(b, a, v);
            }
            for d in 0..n {
                m.set(d, d, 1.0);
            }

            entries.push(ManifestEntry {
                subject_id: subject_id.clone(),
                matrix_path: format!("matrices/{subject_id}.csv"),
                label,
                site: site_name.clone(),
            });
            matrices.push(m);
            global += 1;
        }
    }

    let groups = 4.min(n);
    let node_group_labels = (0..n).map(|v| format!("G{}", v * groups / n)).collect();
    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            version: 1,
            n,
            class_names,
            entries,
            ground_truth_edges: Some(causal.iter().map(|&(i, j)| [i, j]).collect()),
            node_group_labels: Some(node_group_labels),
        },
        matrices,
    })
}
