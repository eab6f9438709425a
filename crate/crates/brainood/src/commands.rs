//! Subcommand implementations. Each is a pure function of (config,
//! referenced input files, seed) to output files; reruns write byte-identical
//! artifacts.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use brainood_core::braindata::{make_splits, Dataset, SplitFold, SplitPlan};
use brainood_core::interpret;
use brainood_core::metrics::{metrics_report, MetricsReport};
use brainood_core::model;
use brainood_core::rng::{derive_seed, tags, DetRng};
use brainood_core::tensor::Tensor;
use brainood_core::trainer::{
    aggregate_folds, evaluate, run_fold, Checkpoint, CvResults, FoldOutcome, TrainResult,
};
use log::info;
use serde::Serialize;

use crate::config::{Mode, RunConfig, SubjectSelection};
use crate::io::{self, checkpoint, manifest, results};
use crate::selftest;

/// Generate the synthetic dataset and write manifest + matrices.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    let data = brainood_core::braindata::generate_synthetic(&cfg.synthetic)?;
    manifest::save_synthetic(&cfg.paths.manifest, &data)?;
    info!(
        "generated {} subjects across {} sites (n={})",
        data.manifest.entries.len(),
        cfg.synthetic.sites,
        cfg.synthetic.n
    );
    println!(
        "wrote {} ({} subjects, {} sites, n={})",
        cfg.paths.manifest.display(),
        data.manifest.entries.len(),
        cfg.synthetic.sites,
        cfg.synthetic.n
    );
    Ok(cfg.paths.manifest.clone())
}

/// Count train-split subjects that belong to their fold's held-out site.
/// Always zero for plans from `make_splits`; audited anyway so a hand-edited
/// plan cannot silently leak.
pub fn leakage_violations(plan: &SplitPlan, subject_sites: &[(String, String)]) -> usize {
    let site_of: std::collections::BTreeMap<&str, &str> = subject_sites
        .iter()
        .map(|(id, site)| (id.as_str(), site.as_str()))
        .collect();
    let mut violations = 0;
    for fold in &plan.folds {
        for id in &fold.train_ids {
            if site_of.get(id.as_str()) == Some(&fold.ood_site.as_str()) {
                violations += 1;
            }
        }
    }
    violations
}

/// Build the site-holdout split plan from the manifest and write it.
pub fn cmd_split(cfg: &RunConfig) -> Result<PathBuf> {
    let man = manifest::load_manifest(&cfg.paths.manifest)?;
    let subject_sites = man.subject_sites();
    let ood_sites: Vec<String> = match &cfg.split.ood_sites {
        Some(sites) => sites.clone(),
        None => {
            let mut sites: Vec<String> =
                subject_sites.iter().map(|(_, s)| s.clone()).collect();
            sites.sort();
            sites.dedup();
            sites
        }
    };
    let plan = make_splits(&subject_sites, &ood_sites, cfg.split.ratio, cfg.train.seed)?;
    let violations = leakage_violations(&plan, &subject_sites);
    if violations > 0 {
        bail!("split plan leaks {violations} held-out-site subjects into training");
    }
    manifest::save_split_plan(&cfg.paths.splits, &plan)?;
    println!(
        "wrote {} ({} folds; leakage audit: 0 violations)",
        cfg.paths.splits.display(),
        plan.folds.len()
    );
    Ok(cfg.paths.splits.clone())
}

fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, SplitPlan)> {
    let dataset = manifest::load_dataset(&cfg.paths.manifest, cfg.sparsify_fraction)?;
    let plan = manifest::load_split_plan(&cfg.paths.splits)?;
    Ok((dataset, plan))
}

fn pick_fold<'p>(plan: &'p SplitPlan, fold: usize) -> Result<&'p SplitFold> {
    plan.folds
        .iter()
        .find(|f| f.fold == fold)
        .ok_or_else(|| anyhow!("fold {fold} not in the split plan (folds 0..{})", plan.folds.len()))
}

fn fold_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.paths.output_dir.join(format!("fold{fold}"))
}

fn save_fold_artifacts(
    cfg: &RunConfig,
    fold: usize,
    result: &TrainResult,
) -> Result<PathBuf> {
    let dir = fold_dir(cfg, fold);
    if let Some(best) = &result.best_id {
        checkpoint::save_checkpoint(&dir.join("best_id.ckpt"), best)?;
    }
    if let Some(best) = &result.best_ood {
        checkpoint::save_checkpoint(&dir.join("best_ood.ckpt"), best)?;
    }
    checkpoint::save_checkpoint(&dir.join("final.ckpt"), &result.final_checkpoint)?;
    results::save_history(&dir.join("history.json"), &result.history)?;
    Ok(dir)
}

fn print_outcome(outcome: &FoldOutcome) {
    let fmt = |v: Option<f64>| match v {
        Some(a) => format!("{:.4}", a),
        None => "n/a".to_string(),
    };
    println!(
        "fold {} (held-out {}): id {} | ood {} | overall {:.4}",
        outcome.fold,
        outcome.ood_site,
        fmt(outcome.id_accuracy),
        fmt(outcome.ood_accuracy),
        outcome.overall_accuracy
    );
}

/// Train the configured fold; write best/final checkpoints and history.
pub fn cmd_train(cfg: &RunConfig) -> Result<FoldOutcome> {
    let (dataset, plan) = load_inputs(cfg)?;
    let fold = pick_fold(&plan, cfg.fold)?;
    info!(
        "training fold {} ({} train / {} val / {} test)",
        fold.fold,
        fold.train_ids.len(),
        fold.val_ids.len(),
        fold.test_ids.len()
    );
    let (outcome, result) = run_fold(&dataset, fold, &cfg.train)?;
    let dir = save_fold_artifacts(cfg, fold.fold, &result)?;
    print_outcome(&outcome);
    println!("checkpoints in {}", dir.display());
    Ok(outcome)
}

fn required_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("set paths.checkpoint (or --config) to the checkpoint to load"))?;
    Ok(checkpoint::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?)
}

/// Hard-mode evaluation: average k binarized subgraph draws per subject.
/// Seeded per subject so the whole pass is reproducible.
fn hard_logits(ckpt: &Checkpoint, dataset: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let classes = dataset.classes();
    let mut logits = Tensor::zeros(idx.len(), classes);
    for (row, &i) in idx.iter().enumerate() {
        let mut rng = DetRng::new(derive_seed(
            ckpt.config.seed,
            &[tags::HARD_SAMPLE, i as u64],
        ));
        let (subject_logits, _) = model::predict_k(
            &ckpt.params,
            &ckpt.config,
            &dataset.networks[i],
            ckpt.config.k,
            true,
            &mut rng,
        )?;
        for j in 0..classes {
            logits.set(row, j, subject_logits.get(0, j));
        }
    }
    Ok(logits)
}

/// Evaluate a checkpoint on the configured fold's test split.
pub fn cmd_eval(cfg: &RunConfig, mode: Mode) -> Result<MetricsReport> {
    let ckpt = required_checkpoint(cfg)?;
    let (dataset, plan) = load_inputs(cfg)?;
    let fold = pick_fold(&plan, cfg.fold)?;

    let report = match mode {
        Mode::Soft => evaluate(&ckpt, &dataset, &fold.test_ids, Some(&fold.ood_site))?,
        Mode::Hard => {
            let idx = dataset.indices_for(&fold.test_ids)?;
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.networks[i].label).collect();
            let flags: Vec<bool> = idx
                .iter()
                .map(|&i| dataset.networks[i].site == fold.ood_site)
                .collect();
            let logits = hard_logits(&ckpt, &dataset, &idx)?;
            metrics_report(&logits, &labels, dataset.classes(), Some(&flags))
        }
    };
    let out = fold_dir(cfg, fold.fold).join(match mode {
        Mode::Soft => "eval.json",
        Mode::Hard => "eval_hard.json",
    });
    results::save_report(&out, &report)?;
    let show = |g: &Option<brainood_core::metrics::GroupMetrics>| match g {
        Some(m) => format!("{:.4}", m.accuracy),
        None => "n/a".to_string(),
    };
    println!(
        "eval fold {}: id {} | ood {} | overall {:.4} -> {}",
        fold.fold,
        show(&report.id),
        show(&report.ood),
        report.overall.accuracy,
        out.display()
    );
    Ok(report)
}

/// Cross-validate every fold (optionally in parallel), write per-fold
/// artifacts and the aggregate results file.
pub fn cmd_cv(cfg: &RunConfig, jobs: usize) -> Result<CvResults> {
    let (dataset, plan) = load_inputs(cfg)?;
    let workers = jobs.max(1).min(plan.folds.len().max(1));
    info!("cross-validation: {} folds, {} workers", plan.folds.len(), workers);

    let mut fold_runs: Vec<Option<(FoldOutcome, TrainResult)>> = Vec::new();
    fold_runs.resize_with(plan.folds.len(), || None);
    if workers <= 1 {
        for (slot, fold) in fold_runs.iter_mut().zip(&plan.folds) {
            *slot = Some(run_fold(&dataset, fold, &cfg.train)?);
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<&mut Vec<Option<(FoldOutcome, TrainResult)>>> =
            Mutex::new(&mut fold_runs);
        let errors: Mutex<Vec<String>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= plan.folds.len() {
                        break;
                    }
                    match run_fold(&dataset, &plan.folds[i], &cfg.train) {
                        Ok(run) => slots.lock().unwrap()[i] = Some(run),
                        Err(e) => errors
                            .lock()
                            .unwrap()
                            .push(format!("fold {}: {e}", plan.folds[i].fold)),
                    }
                });
            }
        });
        let errors = errors.into_inner().unwrap();
        if let Some(first) = errors.first() {
            bail!("{first}");
        }
    }

    let mut outcomes = Vec::with_capacity(fold_runs.len());
    for (run, fold) in fold_runs.into_iter().zip(&plan.folds) {
        let (outcome, result) =
            run.ok_or_else(|| anyhow!("fold {} never ran", fold.fold))?;
        save_fold_artifacts(cfg, fold.fold, &result)?;
        print_outcome(&outcome);
        outcomes.push(outcome);
    }
    let cv = aggregate_folds(outcomes)?;
    let path = cfg.paths.output_dir.join("results.json");
    results::save_results(&path, &cv)?;
    let agg = |c: &Option<brainood_core::trainer::CvColumn>| match c {
        Some(c) => format!("{:.4} ± {:.4}", c.mean, c.std),
        None => "n/a".to_string(),
    };
    println!(
        "aggregate: id {} | ood {} | overall {:.4} ± {:.4} -> {}",
        agg(&cv.aggregate.id),
        agg(&cv.aggregate.ood),
        cv.aggregate.overall.mean,
        cv.aggregate.overall.std,
        path.display()
    );
    Ok(cv)
}

/// Sidecar summary written next to the score-map CSV.
#[derive(Serialize)]
struct InterpretSummary {
    subject_count: usize,
    top_k: interpret::TopEdges,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_block_means: Option<Vec<interpret::GroupBlock>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recovery_auc: Option<f64>,
}

/// Aggregate edge scores over the selected subjects; write the n x n CSV
/// and a JSON summary (top-k edges, group blocks, recovery against planted
/// truth when the manifest carries it).
pub fn cmd_interpret(cfg: &RunConfig) -> Result<PathBuf> {
    let ckpt = required_checkpoint(cfg)?;
    let dataset = manifest::load_dataset(&cfg.paths.manifest, cfg.sparsify_fraction)?;
    let subject_ids: Vec<String> = match cfg.interpret.subjects {
        SubjectSelection::All => dataset
            .networks
            .iter()
            .map(|s| s.subject_id.clone())
            .collect(),
        SubjectSelection::Test => {
            let plan = manifest::load_split_plan(&cfg.paths.splits)?;
            pick_fold(&plan, cfg.fold)?.test_ids.clone()
        }
    };

    let map = interpret::score_map(&ckpt, &dataset, &subject_ids)?;
    let top_k = interpret::top_k_edges(&map, cfg.interpret.top_k)?;
    let recovery = match &dataset.ground_truth_edges {
        Some(truth) => Some(interpret::recovery_auc(&map, truth)?),
        None => None,
    };
    let summary = InterpretSummary {
        subject_count: map.subject_count,
        group_block_means: interpret::group_block_means(&map),
        recovery_auc: recovery,
        top_k,
    };

    let dir = cfg.paths.output_dir.join("interpret");
    io::write_atomic(
        &dir.join("score_map.csv"),
        manifest::matrix_to_csv(&map.scores).as_bytes(),
    )?;
    io::save_json(&dir.join("summary.json"), &summary)?;
    match recovery {
        Some(auc) => println!(
            "score map over {} subjects; recovery AUC {:.4} -> {}",
            map.subject_count,
            auc,
            dir.display()
        ),
        None => println!(
            "score map over {} subjects (no ground truth in manifest) -> {}",
            map.subject_count,
            dir.display()
        ),
    }
    Ok(dir)
}

/// Run the built-in checks; error (nonzero exit) if any fail.
pub fn cmd_selftest() -> Result<()> {
    let reports = selftest::run_all(None);
    let mut failures = 0;
    for r in &reports {
        println!(
            "{} {:<20} max_error {:.3e} (threshold {:.0e}) — {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.threshold,
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} checks failed", reports.len());
    }
    println!("all checks passed");
    Ok(())
}
