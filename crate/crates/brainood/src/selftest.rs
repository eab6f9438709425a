//! Built-in verification: gradient checks, loss-identity oracles, sampler
//! probes, structural symmetry, and a determinism run, each reporting its
//! maximum observed error. `brainood selftest` runs them all and fails the
//! process if any check trips.

use brainood_core::braindata::{generate_synthetic, make_splits, Dataset, SyntheticConfig};
use brainood_core::extractor;
use brainood_core::gradcheck::GradCheck;
use brainood_core::model::{draw_batch_noise, forward_batch, ModelParams};
use brainood_core::rng::DetRng;
use brainood_core::selector;
use brainood_core::tape::Tape;
use brainood_core::tensor::Tensor;
use brainood_core::trainer::{train, TrainConfig};

/// Deliberate defects injected by tests to prove the checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Bias one analytic gradient entry before the finite-difference
    /// comparison.
    GradientBias,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    /// Largest error the check observed (units vary per check; see detail).
    pub max_error: f64,
    /// Errors at or above this fail the check.
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, max_error: f64, threshold: f64, detail: String) -> CheckReport {
    CheckReport {
        name,
        max_error,
        threshold,
        passed: max_error < threshold && max_error.is_finite(),
        detail,
    }
}

fn probe_dataset(seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        n: 6,
        sites: 2,
        subjects_per_site: 4,
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg).unwrap().into_dataset(0.3).unwrap()
}

fn probe_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_dim: 3,
        k: 2,
        batch_size: 2,
        epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

/// Full-objective analytic gradients against central finite differences.
fn check_gradients(fault: Option<Fault>) -> CheckReport {
    let ds = probe_dataset(3);
    let cfg = probe_cfg(3);
    let params = ModelParams::init(ds.n, ds.classes(), &cfg);
    let subjects: Vec<_> = ds.networks.iter().take(2).collect();
    let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let edge_counts: Vec<usize> = subjects.iter().map(|s| s.edges.len()).collect();
    let noise = draw_batch_noise(&cfg, ds.n, &edge_counts, 0, 0);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let art = match forward_batch(&mut tape, &bound, &cfg, &subjects, &labels, &noise) {
        Ok(a) => a,
        Err(e) => return report("gradient-check", f64::INFINITY, 1e-4, format!("forward: {e}")),
    };
    let grads = tape.backward(art.total).expect("backward on fresh graph");

    let mut tensors: Vec<Tensor> = params.visit().iter().map(|(_, t)| (*t).clone()).collect();
    let mut analytic_owned: Vec<Option<Tensor>> = bound
        .order
        .iter()
        .map(|&id| grads.get(id).cloned())
        .collect();
    if fault == Some(Fault::GradientBias) {
        if let Some(Some(g)) = analytic_owned.first_mut() {
            g.data_mut()[0] += 0.5;
        }
    }
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
    let names: Vec<String> = params.visit().iter().map(|(n, _)| n.clone()).collect();
    let worst = result
        .params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    let (max_error, detail) = match worst {
        Some(p) => (
            p.max_rel_err,
            format!("worst tensor {} at {:?}", names[p.index], p.cell),
        ),
        None => (f64::INFINITY, "no parameters checked".to_string()),
    };
    report("gradient-check", max_error, 1e-4, detail)
}

/// Closed-form loss identities: entropy of an all-0.5 mask, reconstruction
/// of equal inputs, alignment of identical samples.
fn check_loss_identities() -> CheckReport {
    let mut max_error: f64 = 0.0;
    let n = 7;

    let mut tape = Tape::new();
    let half = tape.constant(Tensor::full(n, n, 0.5));
    let ent = selector::entropy_loss(&mut tape, half).expect("entropy of constant mask");
    let expected = n as f64 * core::f64::consts::LN_2;
    max_error = max_error.max((tape.value(ent).item() - expected).abs());

    let mut rng = DetRng::new(41);
    let x = Tensor::from_fn(n, n, |_, _| rng.uniform() * 2.0 - 1.0);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x);
    let recon = brainood_core::encoders::recon_loss(&mut tape, a, b).expect("recon of equal");
    max_error = max_error.max(tape.value(recon).item().abs());

    let mut tape = Tape::new();
    let gamma = Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.4 });
    let g1 = tape.constant(gamma.clone());
    let g2 = tape.constant(gamma.clone());
    let g3 = tape.constant(gamma);
    let align = extractor::align_loss(&mut tape, &[g1, g2, g3]).expect("align of identical");
    max_error = max_error.max(tape.value(align).item().abs());

    report(
        "loss-identities",
        max_error,
        1e-9,
        "entropy=n*ln2, recon(x,x)=0, align(identical)=0".to_string(),
    )
}

/// Sampled soft adjacencies must stay inside the input edge support.
fn check_sampler_support() -> CheckReport {
    let mut rng = DetRng::new(77);
    let mut violations = 0usize;
    let n = 8;
    for _ in 0..50 {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.uniform() < 0.4 {
                    pairs.push((i, j));
                }
            }
        }
        if pairs.is_empty() {
            pairs.push((0, 1));
        }
        let alpha = Tensor::from_fn(pairs.len(), 1, |_, _| rng.uniform() * 4.0 - 2.0);
        let noise = extractor::draw_edge_noise(pairs.len(), &mut rng);
        let mut tape = Tape::new();
        let alpha_id = tape.constant(alpha);
        let sample =
            extractor::concrete_sample(&mut tape, alpha_id, &pairs, n, 1.0, Some(&noise))
                .expect("sample");
        let gamma = tape.value(sample.gamma);
        let support: std::collections::BTreeSet<(usize, usize)> = pairs.into_iter().collect();
        for i in 0..n {
            for j in 0..n {
                let inside = i != j && support.contains(&(i.min(j), i.max(j)));
                if !inside && gamma.get(i, j) != 0.0 {
                    violations += 1;
                }
            }
        }
    }
    report(
        "sampler-support",
        violations as f64,
        1.0,
        "off-support cells must stay exactly zero".to_string(),
    )
}

/// Monte-Carlo mean of the relaxed edge against numerical quadrature.
fn check_sampler_mean() -> CheckReport {
    let alpha = 1.0;
    let draws = 20_000usize;
    let mut rng = DetRng::new(123);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..draws {
        let u: f64 = rng.uniform();
        let logit = (u / (1.0 - u)).ln();
        let g = 1.0 / (1.0 + (-(alpha + logit)).exp());
        sum += g;
        sumsq += g * g;
    }
    let mc = sum / draws as f64;
    let var = (sumsq / draws as f64 - mc * mc).max(0.0);
    let se = (var / draws as f64).sqrt();

    // Simpson's rule on u in (0,1); the integrand is smooth and bounded.
    let steps = 20_000usize;
    let f = |u: f64| -> f64 {
        let logit = (u / (1.0 - u)).ln();
        1.0 / (1.0 + (-(alpha + logit)).exp())
    };
    let h = 1.0 / steps as f64;
    let mut integral = 0.0;
    for s in 0..steps {
        let a = (s as f64 + 1e-12) * h;
        let b = a + h - 2e-12 * h;
        let mid = 0.5 * (a + b);
        integral += (b - a) / 6.0 * (f(a) + 4.0 * f(mid) + f(b));
    }
    let z = (mc - integral).abs() / se;
    report(
        "sampler-mean",
        z,
        5.0,
        format!("MC {mc:.6} vs quadrature {integral:.6} ({draws} draws, z-score units)"),
    )
}

/// Mask, sampled adjacency, and reconstruction must be exactly symmetric.
fn check_symmetry() -> CheckReport {
    let ds = probe_dataset(9);
    let cfg = probe_cfg(9);
    let mut max_asym: f64 = 0.0;
    for pass in 0..10 {
        let mut cfg_pass = cfg.clone();
        cfg_pass.seed = 1000 + pass;
        let params = ModelParams::init(ds.n, ds.classes(), &cfg_pass);
        let subjects: Vec<_> = ds.networks.iter().take(2).collect();
        let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
        let edge_counts: Vec<usize> = subjects.iter().map(|s| s.edges.len()).collect();
        let noise = draw_batch_noise(&cfg_pass, ds.n, &edge_counts, 0, pass);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let art =
            forward_batch(&mut tape, &bound, &cfg_pass, &subjects, &labels, &noise).unwrap();
        let mask = selector::build_mask(&mut tape, bound.w_mask.unwrap(), None).unwrap();
        let asym_of = |t: &Tensor| {
            let mut worst: f64 = 0.0;
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    worst = worst.max((t.get(i, j) - t.get(j, i)).abs());
                }
            }
            worst
        };
        max_asym = max_asym.max(asym_of(tape.value(mask.m_base)));
        for &g in &art.gammas {
            max_asym = max_asym.max(asym_of(tape.value(g)));
        }

        // Reconstruction: tanh of a Gram matrix under a symmetric mask.
        let mut rng = DetRng::new(2000 + pass);
        let h = Tensor::from_fn(ds.n, cfg_pass.hidden_dim, |_, _| rng.uniform() - 0.5);
        let h_id = tape.constant(h);
        let x_hat = brainood_core::encoders::reconstruct(&mut tape, h_id, mask.m).unwrap();
        max_asym = max_asym.max(asym_of(tape.value(x_hat)));
    }
    report(
        "structure-symmetry",
        max_asym,
        1e-12,
        "mask and sampled adjacencies, 10 passes".to_string(),
    )
}

/// Two identical short trainings must produce identical checkpoints.
fn check_determinism() -> CheckReport {
    let ds = probe_dataset(13);
    let cfg = probe_cfg(13);
    let plan = make_splits(&ds.subject_sites(), &ds.sites(), (2, 1, 1), 13).unwrap();
    let a = train(&ds, &plan.folds[0], &cfg);
    let b = train(&ds, &plan.folds[0], &cfg);
    let (max_error, detail) = match (a, b) {
        (Ok(a), Ok(b)) => {
            let same = a.final_checkpoint == b.final_checkpoint
                && a.step_losses == b.step_losses
                && a.history == b.history;
            (
                if same { 0.0 } else { 1.0 },
                "two 2-epoch runs compared field by field".to_string(),
            )
        }
        (Err(e), _) | (_, Err(e)) => (f64::INFINITY, format!("training failed: {e}")),
    };
    report("determinism", max_error, 0.5, detail)
}

/// Run every check; `fault` injects a deliberate defect (test fixture).
pub fn run_all(fault: Option<Fault>) -> Vec<CheckReport> {
    vec![
        check_gradients(fault),
        check_loss_identities(),
        check_sampler_support(),
        check_sampler_mean(),
        check_symmetry(),
        check_determinism(),
    ]
}
