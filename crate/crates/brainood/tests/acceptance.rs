//! Release acceptance suite. Each test covers one gate and prints a single
//! `acceptance[<gate>]: PASS|FAIL — <detail>` line before asserting, so a
//! run with `--nocapture` reads as a checklist. The site-holdout benchmark
//! experiment is heavyweight and shared by the two tests that consume it.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use brainood_core::adam::AdamState;
use brainood_core::braindata::{generate_synthetic, make_splits, Dataset, SyntheticConfig};
use brainood_core::encoders::{self, gin_encode, BnUse, GinLayerIds};
use brainood_core::extractor::{self, concrete_sample, draw_edge_noise};
use brainood_core::gradcheck::GradCheck;
use brainood_core::interpret::{recovery_auc, score_map};
use brainood_core::model::{
    draw_batch_noise, forward_batch, update_running_stats, ModelFlags, ModelParams,
};
use brainood_core::rng::DetRng;
use brainood_core::selector;
use brainood_core::tape::Tape;
use brainood_core::tensor::Tensor;
use brainood_core::trainer::{
    erm_baseline_losses, run_fold, train, Checkpoint, TrainConfig, CHECKPOINT_VERSION,
};
use sha2::{Digest, Sha256};

/// Print the gate's checklist line and return whether it passed.
fn gate(name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "acceptance[{name}]: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---------------------------------------------------------------------------
// Gradients: the full four-term objective against central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn full_objective_gradients_match_finite_differences() {
    let started = Instant::now();
    let syn = SyntheticConfig {
        n: 8,
        sites: 2,
        subjects_per_site: 3,
        seed: 5,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&syn).unwrap().into_dataset(0.2).unwrap();
    let cfg = TrainConfig {
        hidden_dim: 4,
        k: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(ds.n, ds.classes(), &cfg);
    let subjects: Vec<_> = ds.networks.iter().take(3).collect();
    let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let edge_counts: Vec<usize> = subjects.iter().map(|s| s.edges.len()).collect();
    let noise = draw_batch_noise(&cfg, ds.n, &edge_counts, 0, 0);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let art = forward_batch(&mut tape, &bound, &cfg, &subjects, &labels, &noise).unwrap();
    let grads = tape.backward(art.total).unwrap();

    let mut tensors: Vec<Tensor> = params.visit().iter().map(|(_, t)| (*t).clone()).collect();
    let analytic_owned: Vec<Option<Tensor>> = bound
        .order
        .iter()
        .map(|&id| grads.get(id).cloned())
        .collect();
    let analytic: Vec<Option<&Tensor>> = analytic_owned.iter().map(|g| g.as_ref()).collect();

    let loss_at = |values: &[Tensor]| -> f64 {
        let mut probe = params.clone();
        for (slot, v) in probe.visit_mut().into_iter().zip(values) {
            *slot = v.clone();
        }
        let mut t = Tape::new();
        let b = probe.bind(&mut t);
        let a = forward_batch(&mut t, &b, &cfg, &subjects, &labels, &noise).unwrap();
        t.value(a.total).item()
    };
    let checker = GradCheck {
        step: 1e-5,
        floor: 1e-3,
    };
    let result = checker.run(&mut tensors, &analytic, loss_at);
    let elapsed = started.elapsed();

    let names: Vec<String> = params.visit().iter().map(|(n, _)| n.clone()).collect();
    let worst = result
        .params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("parameters were checked");
    let every_tensor_ok = result.params.iter().all(|p| p.max_rel_err < 1e-4);
    let in_time = elapsed.as_secs_f64() < 10.0;
    let pass = gate(
        "gradients",
        every_tensor_ok && in_time,
        &format!(
            "{} tensors, worst rel err {:.3e} ({} at {:?}), {:.1}s",
            result.params.len(),
            worst.max_rel_err,
            names[worst.index],
            worst.cell,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "gradient mismatch or overtime (limit 10s)");
}

// ---------------------------------------------------------------------------
// Loss terms: closed forms, plus independent oracles on random inputs.
// ---------------------------------------------------------------------------

fn population_std(values: &[f64]) -> f64 {
    let t = values.len() as f64;
    let mean = values.iter().sum::<f64>() / t;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
    var.sqrt()
}

#[test]
fn loss_terms_match_closed_forms_and_random_oracles() {
    // Closed forms first.
    let n = 9;
    let mut tape = Tape::new();
    let half = tape.constant(Tensor::full(n, n, 0.5));
    let ent = selector::entropy_loss(&mut tape, half).unwrap();
    let entropy_err = (tape.value(ent).item() - n as f64 * std::f64::consts::LN_2).abs();

    let mut rng = DetRng::new(61);
    let x = Tensor::from_fn(n, n, |_, _| rng.uniform() * 2.0 - 1.0);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x);
    let recon = encoders::recon_loss(&mut tape, a, b).unwrap();
    let recon_equal = tape.value(recon).item();

    let mut tape = Tape::new();
    let g = Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.37 });
    let g1 = tape.constant(g.clone());
    let g2 = tape.constant(g);
    let align = extractor::align_loss(&mut tape, &[g1, g2]).unwrap();
    let align_identical = tape.value(align).item();

    // Independent oracles on random 6×6 inputs.
    let m = 6;
    let mut rng = DetRng::new(62);
    let p = Tensor::from_fn(m, m, |_, _| 0.05 + 0.9 * rng.uniform());
    let mut tape = Tape::new();
    let p_id = tape.constant(p.clone());
    let ent = selector::entropy_loss(&mut tape, p_id).unwrap();
    let mut oracle = 0.0;
    for i in 0..m {
        for j in 0..m {
            let v = p.get(i, j);
            oracle += v * v.ln() + (1.0 - v) * (1.0 - v).ln();
        }
    }
    oracle *= -1.0 / m as f64;
    let entropy_oracle_err = (tape.value(ent).item() - oracle).abs();

    let x_hat = Tensor::from_fn(m, m, |_, _| rng.uniform() * 2.0 - 1.0);
    let x_masked = Tensor::from_fn(m, m, |_, _| rng.uniform() * 2.0 - 1.0);
    let mut tape = Tape::new();
    let a = tape.constant(x_hat.clone());
    let b = tape.constant(x_masked.clone());
    let recon = encoders::recon_loss(&mut tape, a, b).unwrap();
    let mut oracle = 0.0;
    for i in 0..m {
        for j in 0..m {
            let d = x_hat.get(i, j) - x_masked.get(i, j);
            oracle += d * d;
        }
    }
    oracle /= m as f64;
    let recon_oracle_err = (tape.value(recon).item() - oracle).abs();

    let gammas: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_fn(m, m, |_, _| rng.uniform()))
        .collect();
    let mut tape = Tape::new();
    let ids: Vec<_> = gammas.iter().map(|g| tape.constant(g.clone())).collect();
    let align = extractor::align_loss(&mut tape, &ids).unwrap();
    let mut oracle = 0.0;
    for i in 0..m {
        for j in 0..m {
            let cell: Vec<f64> = gammas.iter().map(|g| g.get(i, j)).collect();
            oracle += population_std(&cell);
        }
    }
    oracle /= (m * m) as f64;
    let align_oracle_err = (tape.value(align).item() - oracle).abs();

    let closed_ok = entropy_err <= 1e-9 && recon_equal == 0.0 && align_identical == 0.0;
    let oracle_worst = entropy_oracle_err
        .max(recon_oracle_err)
        .max(align_oracle_err);
    let pass = gate(
        "loss-identities",
        closed_ok && oracle_worst <= 1e-12,
        &format!(
            "entropy |Δ| {entropy_err:.1e}, recon(x,x) {recon_equal:.1e}, \
             align(identical) {align_identical:.1e}, worst random-oracle |Δ| {oracle_worst:.1e}"
        ),
    );
    assert!(pass, "a loss term deviates from its oracle");
}

// ---------------------------------------------------------------------------
// Sampler: Monte-Carlo mean against quadrature, and support containment.
// ---------------------------------------------------------------------------

#[test]
fn sampler_mean_matches_quadrature_and_stays_on_support() {
    // 10⁶ relaxed draws at α = 1, τ = 1, through the real sampling code.
    let draws = 1_000_000usize;
    let n = 1_415; // n(n−1)/2 = 1,000,405 unordered pairs ≥ draws
    let mut pairs = Vec::with_capacity(draws);
    'outer: for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
            if pairs.len() == draws {
                break 'outer;
            }
        }
    }
    let mut rng = DetRng::new(2024);
    let noise = draw_edge_noise(draws, &mut rng);
    let mut tape = Tape::new();
    let alpha = tape.constant(Tensor::full(draws, 1, 1.0));
    let sample = concrete_sample(&mut tape, alpha, &pairs, n, 1.0, Some(&noise)).unwrap();
    let gamma = tape.value(sample.gamma_edges);
    let mean = gamma.data().iter().sum::<f64>() / draws as f64;
    let var = gamma
        .data()
        .iter()
        .map(|g| (g - mean) * (g - mean))
        .sum::<f64>()
        / draws as f64;
    let se = (var / draws as f64).sqrt();

    // Simpson quadrature of σ(1 + logit(u)) on (0,1); the integrand extends
    // continuously to 0 at u=0 and 1 at u=1.
    let f = |u: f64| -> f64 {
        let logit = (u / (1.0 - u)).ln();
        1.0 / (1.0 + (-(1.0 + logit)).exp())
    };
    let steps = 200_000usize;
    let h = 1.0 / steps as f64;
    let mut quad = 0.0;
    for s in 0..steps {
        let a = (s as f64) * h + 1e-13;
        let b = (s as f64 + 1.0) * h - 1e-13;
        quad += (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
    }
    let z = (mean - quad).abs() / se;

    // Support containment on 1000 random instances.
    let mut rng = DetRng::new(77);
    let mut violations = 0usize;
    let small = 12;
    for _ in 0..1000 {
        let mut edges = Vec::new();
        for i in 0..small {
            for j in (i + 1)..small {
                if rng.uniform() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 1));
        }
        let alpha = Tensor::from_fn(edges.len(), 1, |_, _| rng.uniform() * 4.0 - 2.0);
        let noise = draw_edge_noise(edges.len(), &mut rng);
        let mut tape = Tape::new();
        let alpha_id = tape.constant(alpha);
        let s = concrete_sample(&mut tape, alpha_id, &edges, small, 1.0, Some(&noise)).unwrap();
        let g = tape.value(s.gamma);
        let support: std::collections::BTreeSet<(usize, usize)> = edges.into_iter().collect();
        for i in 0..small {
            for j in 0..small {
                let inside = i != j && support.contains(&(i.min(j), i.max(j)));
                if !inside && g.get(i, j) != 0.0 {
                    violations += 1;
                }
            }
        }
    }

    let pass = gate(
        "sampler",
        z < 3.0 && violations == 0,
        &format!(
            "MC mean {mean:.6} vs quadrature {quad:.6} (z = {z:.2}, {draws} draws); \
             {violations} off-support cells over 1000 instances"
        ),
    );
    assert!(pass, "sampler mean or support containment failed");
}

// ---------------------------------------------------------------------------
// Structure: symmetry of mask/samples/reconstructions, and permutation
// equivariance of the GIN encoder.
// ---------------------------------------------------------------------------

fn max_asymmetry(t: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            worst = worst.max((t.get(i, j) - t.get(j, i)).abs());
        }
    }
    worst
}

fn random_layer(tape: &mut Tape, rng: &mut DetRng, d_in: usize, d_out: usize) -> GinLayerIds {
    let mat = |r: usize, c: usize, tape: &mut Tape, rng: &mut DetRng| {
        tape.constant(Tensor::from_fn(r, c, |_, _| rng.uniform() - 0.5))
    };
    let w1 = mat(d_in, d_out, tape, rng);
    let b1 = mat(1, d_out, tape, rng);
    let w2 = mat(d_out, d_out, tape, rng);
    let b2 = mat(1, d_out, tape, rng);
    let eps = tape.constant(Tensor::scalar(0.3));
    let bn_gamma = tape.constant(Tensor::from_fn(1, d_out, |_, _| 0.8 + 0.4 * rng.uniform()));
    let bn_beta = tape.constant(Tensor::from_fn(1, d_out, |_, _| 0.2 * (rng.uniform() - 0.5)));
    GinLayerIds {
        w1,
        b1,
        w2,
        b2,
        eps,
        bn_gamma,
        bn_beta,
    }
}

#[test]
fn structures_stay_symmetric_and_encoder_is_permutation_equivariant() {
    // Symmetry of the mask, every sampled adjacency, and every
    // reconstruction over 100 full forward passes.
    let syn = SyntheticConfig {
        n: 6,
        sites: 2,
        subjects_per_site: 4,
        seed: 9,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&syn).unwrap().into_dataset(0.3).unwrap();
    let mut max_asym: f64 = 0.0;
    for pass in 0..100 {
        let cfg = TrainConfig {
            hidden_dim: 3,
            k: 2,
            batch_size: 2,
            seed: 3000 + pass,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(ds.n, ds.classes(), &cfg);
        let subjects: Vec<_> = ds.networks.iter().take(2).collect();
        let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
        let edge_counts: Vec<usize> = subjects.iter().map(|s| s.edges.len()).collect();
        let noise = draw_batch_noise(&cfg, ds.n, &edge_counts, 0, pass);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let art = forward_batch(&mut tape, &bound, &cfg, &subjects, &labels, &noise).unwrap();
        max_asym = max_asym.max(max_asymmetry(tape.value(art.m_base.unwrap())));
        for &g in &art.gammas {
            max_asym = max_asym.max(max_asymmetry(tape.value(g)));
        }
        assert!(!art.x_hats.is_empty(), "reconstruction runs in the default config");
        for &xh in &art.x_hats {
            max_asym = max_asym.max(max_asymmetry(tape.value(xh)));
        }
    }

    // Permutation equivariance of the encoder on 20 random permutations.
    let nodes = 10;
    let d0 = 5;
    let d = 6;
    let mut max_dev: f64 = 0.0;
    for it in 0..20 {
        let mut rng = DetRng::new(7000 + it);
        let mut tape = Tape::new();
        let layers = [
            random_layer(&mut tape, &mut rng, d0, d),
            random_layer(&mut tape, &mut rng, d, d),
        ];
        let x = Tensor::from_fn(nodes, d0, |_, _| rng.uniform() * 2.0 - 1.0);
        let mut a = Tensor::zeros(nodes, nodes);
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                if rng.uniform() < 0.4 {
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
            }
        }
        let mut perm: Vec<usize> = (0..nodes).collect();
        rng.shuffle(&mut perm);
        let x_p = Tensor::from_fn(nodes, d0, |i, c| x.get(perm[i], c));
        let a_p = Tensor::from_fn(nodes, nodes, |i, j| a.get(perm[i], perm[j]));

        let x_id = tape.constant(x);
        let a_id = tape.constant(a);
        let xp_id = tape.constant(x_p);
        let ap_id = tape.constant(a_p);
        let enc = gin_encode(
            &mut tape,
            &[x_id],
            &[a_id],
            &layers,
            &[BnUse::Train, BnUse::Train],
            &[None, None],
        )
        .unwrap();
        let enc_p = gin_encode(
            &mut tape,
            &[xp_id],
            &[ap_id],
            &layers,
            &[BnUse::Train, BnUse::Train],
            &[None, None],
        )
        .unwrap();
        let h = tape.value(enc.per_subject[0]).clone();
        let h_p = tape.value(enc_p.per_subject[0]).clone();
        for i in 0..nodes {
            for c in 0..d {
                max_dev = max_dev.max((h_p.get(i, c) - h.get(perm[i], c)).abs());
            }
        }
    }

    let pass = gate(
        "structure",
        max_asym <= f64::EPSILON && max_dev < 1e-9,
        &format!(
            "max asymmetry {max_asym:.1e} over 100 passes; \
             max permutation deviation {max_dev:.1e} over 20 permutations"
        ),
    );
    assert!(pass, "symmetry or permutation equivariance violated");
}

// ---------------------------------------------------------------------------
// Determinism: identical config and seed give bitwise-identical artifacts.
// ---------------------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"
sparsify_fraction = 0.2

[synthetic]
n = 8
sites = 3
subjects_per_site = 6
seed = 33

[train]
hidden_dim = 6
k = 2
batch_size = 8
epochs = 2
seed = 33

[split]
ratio = [2, 1, 1]
"#;

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainood"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn collect_files(root: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) {
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, base, out);
        } else {
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            out.push((rel, path));
        }
    }
}

/// One digest over every artifact a full pipeline run leaves behind,
/// keyed by relative path so the layout itself is part of the comparison.
fn digest_run(dir: &Path) -> String {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files);
    files.sort();
    let mut hasher = Sha256::new();
    for (rel, path) in files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(std::fs::read(path).unwrap());
    }
    format!("{:x}", hasher.finalize())
}

#[test]
fn identical_config_and_seed_reproduce_artifacts_bitwise() {
    let mut digests = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        std::fs::write(dir.join("run.toml"), DETERMINISM_CONFIG).unwrap();
        for args in [
            ["--config", "run.toml", "generate"].as_slice(),
            &["--config", "run.toml", "split"],
            &["--config", "run.toml", "train"],
            &["--config", "run.toml", "cv", "--out", "cv"],
        ] {
            let out = run_in(dir, args);
            assert!(
                out.status.success(),
                "{args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        std::fs::remove_file(dir.join("run.toml")).unwrap();
        digests.push(digest_run(dir));
    }
    let pass = gate(
        "determinism",
        digests[0] == digests[1],
        &format!(
            "sha256 over checkpoints, history, and results: {}… twice",
            &digests[0][..12]
        ),
    );
    assert!(pass, "two identical runs diverged: {} vs {}", digests[0], digests[1]);
}

// ---------------------------------------------------------------------------
// Ablation equivalence: everything off matches a hand-written ERM baseline.
// ---------------------------------------------------------------------------

#[test]
fn fully_ablated_config_matches_handwritten_erm_bitwise() {
    let syn = SyntheticConfig {
        n: 12,
        sites: 2,
        subjects_per_site: 24,
        seed: 7,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&syn).unwrap().into_dataset(0.2).unwrap();
    let sites = ds.sites();
    let plan = make_splits(&ds.subject_sites(), &sites[..1], (2, 1, 1), 7).unwrap();
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        hidden_dim: 8,
        k: 2,
        batch_size: 8,
        epochs: 7,
        seed: 11,
        flags: ModelFlags::baseline(),
        ..TrainConfig::default()
    };
    let result = train(&ds, &plan.folds[0], &cfg).unwrap();
    let baseline = erm_baseline_losses(&ds, &plan.folds[0], &cfg, 20).unwrap();

    assert!(result.step_losses.len() >= 20, "run covers 20 steps");
    assert_eq!(baseline.len(), 20);
    let matching = result
        .step_losses
        .iter()
        .zip(&baseline)
        .take_while(|(a, b)| a.to_bits() == b.to_bits())
        .count();
    let pass = gate(
        "ablation-equivalence",
        matching == 20,
        &format!(
            "{matching}/20 steps bitwise equal (first {:.6}, last {:.6})",
            baseline[0],
            baseline[19]
        ),
    );
    assert!(pass, "ablated model diverged from the ERM baseline at step {matching}");
}

// ---------------------------------------------------------------------------
// Site-holdout benchmark shared by the OOD-margin and interpretation gates.
//
// Protocol fixed by a one-time calibration run (examples/calibrate.rs):
// default synthetic benchmark (n=32, 4 sites, 50 subjects each, site bias
// 0.3, causal strength 0.4, noise 0.2), 3-fold site holdout over the first
// three sites, 6/2/2 split ratio, split seed 42, default training config.
// 30 epochs reproduces the calibration's 100-epoch numbers bitwise because
// checkpoint selection stabilizes much earlier.
// ---------------------------------------------------------------------------

/// Mean OOD margin the calibration run pinned, in accuracy points.
const PINNED_MARGIN_POINTS: f64 = -5.33;
/// Causal-edge recovery AUC of the trained fold-0 map, pinned likewise.
const PINNED_TRAINED_AUC: f64 = 0.6295;
/// Same map from an untrained (freshly initialized) checkpoint.
const PINNED_UNTRAINED_AUC: f64 = 0.5990;

struct Experiment {
    full_ood_mean: f64,
    erm_ood_mean: f64,
    margin_points: f64,
    trained_auc: f64,
    untrained_auc: f64,
}

fn erm_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        flags: ModelFlags::baseline(),
        ..base.clone()
    }
}

/// Untrained checkpoint: fresh parameters with batch-norm running statistics
/// warmed by one forward pass, so evaluation-mode maps are non-degenerate.
fn untrained_checkpoint(ds: &Dataset, cfg: &TrainConfig) -> Checkpoint {
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

fn build_experiment() -> Experiment {
    let ds = generate_synthetic(&SyntheticConfig::default())
        .unwrap()
        .into_dataset(0.2)
        .unwrap();
    let sites = ds.sites();
    let plan = make_splits(&ds.subject_sites(), &sites[..3], (6, 2, 2), 42).unwrap();
    let full_cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let erm_cfg = erm_config(&full_cfg);

    let mut full_ood = Vec::new();
    let mut erm_ood = Vec::new();
    let mut fold0_best: Option<Checkpoint> = None;
    for fold in &plan.folds {
        let (outcome, result) = run_fold(&ds, fold, &full_cfg).unwrap();
        full_ood.push(outcome.ood_accuracy.expect("fold has OOD test subjects"));
        if fold.fold == 0 {
            fold0_best = Some(
                result
                    .best_id
                    .or(result.best_ood)
                    .unwrap_or(result.final_checkpoint),
            );
        }
    }
    for fold in &plan.folds {
        let (outcome, _) = run_fold(&ds, fold, &erm_cfg).unwrap();
        erm_ood.push(outcome.ood_accuracy.expect("fold has OOD test subjects"));
    }
    let full_ood_mean = full_ood.iter().sum::<f64>() / full_ood.len() as f64;
    let erm_ood_mean = erm_ood.iter().sum::<f64>() / erm_ood.len() as f64;

    let truth = ds.ground_truth_edges.clone().expect("synthetic data is annotated");
    let trained = fold0_best.expect("fold 0 trained");
    let trained_map = score_map(&trained, &ds, &plan.folds[0].test_ids).unwrap();
    let trained_auc = recovery_auc(&trained_map, &truth).unwrap();
    let fresh = untrained_checkpoint(&ds, &full_cfg);
    let fresh_map = score_map(&fresh, &ds, &plan.folds[0].test_ids).unwrap();
    let untrained_auc = recovery_auc(&fresh_map, &truth).unwrap();

    Experiment {
        full_ood_mean,
        erm_ood_mean,
        margin_points: (full_ood_mean - erm_ood_mean) * 100.0,
        trained_auc,
        untrained_auc,
    }
}

fn experiment() -> &'static Experiment {
    static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();
    EXPERIMENT.get_or_init(build_experiment)
}

#[test]
fn full_model_beats_erm_on_held_out_sites() {
    let started = Instant::now();
    let e = experiment();
    let improvement = e.margin_points > 0.0;
    let reproduced = (e.margin_points - PINNED_MARGIN_POINTS).abs() <= 5.0;
    let in_time = started.elapsed().as_secs_f64() < 900.0;
    let pass = gate(
        "ood-improvement",
        improvement && reproduced && in_time,
        &format!(
            "full OOD {:.4} vs ERM {:.4}: margin {:+.2} points \
             (calibrated {PINNED_MARGIN_POINTS:+.2} ± 5), {:.0}s",
            e.full_ood_mean,
            e.erm_ood_mean,
            e.margin_points,
            started.elapsed().as_secs_f64()
        ),
    );
    assert!(
        pass,
        "no OOD improvement: margin {:+.2} points (see decisions ledger: at the \
         benchmark's pinned signal strengths ERM is already OOD-robust)",
        e.margin_points
    );
}

#[test]
fn trained_score_map_recovers_planted_edges() {
    let e = experiment();
    let gap = e.trained_auc - e.untrained_auc;
    let pass = gate(
        "interpretation",
        e.trained_auc > 0.8 && gap >= 0.2,
        &format!(
            "recovery AUC {:.4} trained (calibrated {PINNED_TRAINED_AUC:.4}) vs \
             {:.4} untrained (calibrated {PINNED_UNTRAINED_AUC:.4}), gap {gap:+.4}",
            e.trained_auc, e.untrained_auc
        ),
    );
    assert!(
        pass,
        "recovery AUC {:.4} (gap {gap:+.4}) below target (see decisions ledger: \
         sparsification admits only part of the planted edges into any graph)",
        e.trained_auc
    );
}

// ---------------------------------------------------------------------------
// Split protocol: no held-out-site subject may ever reach a train split.
// ---------------------------------------------------------------------------

#[test]
fn split_plans_never_leak_held_out_sites_into_training() {
    let mut folds_audited = 0usize;
    let mut leaks = 0usize;
    let mut partition_errors = 0usize;
    for seed in [1u64, 2, 3] {
        let syn = SyntheticConfig {
            n: 16,
            sites: 10,
            subjects_per_site: 100,
            causal_edge_fraction: 0.05,
            seed,
            ..SyntheticConfig::default()
        };
        let manifest = generate_synthetic(&syn).unwrap().manifest;
        let subjects = manifest.subject_sites();
        assert_eq!(subjects.len(), 1000);
        let site_of: std::collections::BTreeMap<&str, &str> = subjects
            .iter()
            .map(|(id, site)| (id.as_str(), site.as_str()))
            .collect();
        let mut all_sites: Vec<String> =
            subjects.iter().map(|(_, s)| s.clone()).collect();
        all_sites.sort();
        all_sites.dedup();
        assert_eq!(all_sites.len(), 10);

        let plan = make_splits(&subjects, &all_sites, (8, 1, 1), seed).unwrap();
        assert_eq!(plan.folds.len(), 10);
        for fold in &plan.folds {
            folds_audited += 1;
            leaks += fold
                .train_ids
                .iter()
                .filter(|id| site_of[id.as_str()] == fold.ood_site)
                .count();
            let mut seen = std::collections::BTreeSet::new();
            for id in fold
                .train_ids
                .iter()
                .chain(&fold.val_ids)
                .chain(&fold.test_ids)
            {
                if !seen.insert(id.as_str()) {
                    partition_errors += 1;
                }
            }
            if seen.len() != subjects.len() {
                partition_errors += 1;
            }
        }
    }
    let pass = gate(
        "split-protocol",
        leaks == 0 && partition_errors == 0,
        &format!(
            "{folds_audited} folds over 3 manifests of 1000 subjects: \
             {leaks} leaked subjects, {partition_errors} partition errors"
        ),
    );
    assert!(pass, "split audit failed");
}
