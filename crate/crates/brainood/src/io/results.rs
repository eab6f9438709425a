//! JSON results artifacts: cross-validation summaries, per-epoch training
//! history, and standalone evaluation reports.

use std::path::Path;

use brainood_core::metrics::MetricsReport;
use brainood_core::trainer::{CvResults, EpochRecord};

use super::{load_json, save_json, IoError};

pub fn save_results(path: &Path, results: &CvResults) -> Result<(), IoError> {
    save_json(path, results)
}

pub fn load_results(path: &Path) -> Result<CvResults, IoError> {
    load_json(path)
}

pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<(), IoError> {
    save_json(path, &history)
}

pub fn save_report(path: &Path, report: &MetricsReport) -> Result<(), IoError> {
    save_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use brainood_core::metrics::GroupMetrics;
    use brainood_core::trainer::{CvAggregate, CvColumn, FoldOutcome};

    fn group(acc: f64) -> GroupMetrics {
        GroupMetrics {
            count: 10,
            accuracy: acc,
            precision: 0.5,
            recall: 2.0 / 3.0,
            f1_positive: 4.0 / 7.0,
            micro_f1: acc,
            roc_auc: Some(0.75),
            confusion: vec![vec![3, 2], vec![1, 4]],
        }
    }

    #[test]
    fn results_file_roundtrips_exactly() {
        let results = CvResults {
            folds: vec![FoldOutcome {
                fold: 0,
                ood_site: "site02".into(),
                seed: 0x9e3779b97f4a7c15,
                id_accuracy: Some(0.625),
                ood_accuracy: Some(1.0 / 3.0),
                overall_accuracy: 0.6,
                report: MetricsReport {
                    overall: group(0.6),
                    id: Some(group(0.625)),
                    ood: Some(group(1.0 / 3.0)),
                },
            }],
            aggregate: CvAggregate {
                id: Some(CvColumn {
                    mean: 0.625,
                    std: 0.0,
                }),
                ood: Some(CvColumn {
                    mean: 1.0 / 3.0,
                    std: 0.0,
                }),
                overall: CvColumn {
                    mean: 0.6,
                    std: 7.0710678118654755,
                },
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.json");
        save_results(&path, &results).unwrap();
        let loaded = load_results(&path).unwrap();
        assert_eq!(loaded, results, "JSON float round-trip must be exact");

        // Rewriting the loaded value reproduces the bytes.
        let path2 = dir.path().join("again.json");
        save_results(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn history_roundtrips() {
        let history = vec![EpochRecord {
            epoch: 0,
            total: 3.32,
            cls: 2.0,
            entropy: 12.0,
            recon: 4.0,
            align: 1.6,
            id_val_accuracy: Some(0.5),
            ood_val_accuracy: None,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.json");
        save_history(&path, &history).unwrap();
        let loaded: Vec<EpochRecord> = super::super::load_json(&path).unwrap();
        assert_eq!(loaded, history);
    }
}
