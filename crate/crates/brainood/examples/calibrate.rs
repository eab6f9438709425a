//! One-time calibration run behind the constants pinned in the acceptance
//! suite (`tests/acceptance.rs`).
//!
//! Trains the full model and the ERM ablation over a 3-fold site-holdout
//! plan on the default synthetic benchmark, then prints per-fold OOD
//! accuracies, the mean margin between the two models, and the
//! edge-recovery AUC of the trained score map against an untrained one.
//!
//! Run with: `cargo run --release -p brainood --example calibrate`

use std::time::Instant;

use brainood_core::adam::AdamState;
use brainood_core::braindata::{generate_synthetic, make_splits, SyntheticConfig};
use brainood_core::interpret::{recovery_auc, score_map};
use brainood_core::model::{
    draw_batch_noise, forward_batch, update_running_stats, ModelFlags, ModelParams,
};
use brainood_core::tape::Tape;
use brainood_core::trainer::{run_fold, Checkpoint, TrainConfig, CHECKPOINT_VERSION};

fn erm_config() -> TrainConfig {
    TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        flags: ModelFlags {
            use_mask: false,
            use_sampler: false,
            use_entropy: false,
            use_recon: false,
            use_align: false,
            ..ModelFlags::default()
        },
        ..TrainConfig::default()
    }
}

/// Untrained checkpoint with warmed running statistics, so its edge scores
/// vary across cells instead of collapsing to a constant map.
fn untrained_checkpoint(
    ds: &brainood_core::braindata::Dataset,
    cfg: &TrainConfig,
) -> Checkpoint {
    let mut params = ModelParams::init(ds.n, ds.classes(), cfg);
    let subjects: Vec<_> = ds.networks.iter().take(8).collect();
    let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let edge_counts: Vec<usize> = subjects.iter().map(|s| s.edges.len()).collect();
    let noise = draw_batch_noise(cfg, ds.n, &edge_counts, 0, 0);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let art = forward_batch(&mut tape, &bound, cfg, &subjects, &labels, &noise).unwrap();
    update_running_stats(&mut params, &tape, &art.bn_updates);
    let shapes: Vec<(usize, usize)> = params.visit().iter().map(|(_, t)| t.shape()).collect();
    Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params,
        adam: AdamState::new(cfg.lr, &shapes),
        epoch: 0,
        val_accuracy: 0.0,
    }
}

fn main() {
    let wall = Instant::now();
    let syn = SyntheticConfig::default();
    let ds = generate_synthetic(&syn)
        .unwrap()
        .into_dataset(0.2)
        .unwrap();
    let sites = ds.sites();
    let ood_sites: Vec<String> = sites[..3].to_vec();
    let plan = make_splits(&ds.subject_sites(), &ood_sites, (6, 2, 2), 42).unwrap();

    let full_cfg = TrainConfig::default();
    let mut fold0_best: Option<Checkpoint> = None;
    let mut means = Vec::new();
    for (name, cfg) in [("full", full_cfg.clone()), ("erm", erm_config())] {
        let mut oods = Vec::new();
        let mut ids = Vec::new();
        for fold in &plan.folds {
            let t0 = Instant::now();
            let (outcome, result) = run_fold(&ds, fold, &cfg).unwrap();
            let ood_acc = outcome.ood_accuracy.expect("held-out site in test split");
            let id_acc = outcome.id_accuracy.expect("ID subjects in test split");
            println!(
                "{name} fold {}: id {:.4} ood {:.4} overall {:.4} ({:.1?})",
                fold.fold,
                id_acc,
                ood_acc,
                outcome.overall_accuracy,
                t0.elapsed()
            );
            oods.push(ood_acc);
            ids.push(id_acc);
            if name == "full" && fold.fold == 0 {
                fold0_best = Some(result.best_id.clone().expect("validation tracked"));
            }
        }
        let mean = oods.iter().sum::<f64>() / oods.len() as f64;
        let mean_id = ids.iter().sum::<f64>() / ids.len() as f64;
        println!("{name}: mean id {mean_id:.4}, mean ood {mean:.4}");
        means.push(mean);
    }
    println!(
        "margin: {:+.2} accuracy points (full − erm)",
        (means[0] - means[1]) * 100.0
    );

    let truth = ds.ground_truth_edges.clone().expect("synthetic truth");
    let ckpt = fold0_best.expect("full model fold 0 ran");
    let map = score_map(&ckpt, &ds, &plan.folds[0].test_ids).unwrap();
    let trained_auc = recovery_auc(&map, &truth).unwrap();
    let fresh = untrained_checkpoint(&ds, &full_cfg);
    let fresh_map = score_map(&fresh, &ds, &plan.folds[0].test_ids).unwrap();
    let fresh_auc = recovery_auc(&fresh_map, &truth).unwrap();
    println!(
        "recovery AUC: trained {trained_auc:.4}, untrained {fresh_auc:.4}, gap {:.4}",
        trained_auc - fresh_auc
    );
    println!("total wall time {:.1?}", wall.elapsed());
}
