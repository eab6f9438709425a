//! GIN message-passing encoder, high-pass GNN, and the symmetric
//! reconstruction head with its loss.
//!
//! The GIN accepts an arbitrary non-negative edge-weight matrix per subject,
//! so one encoder serves both the binary adjacency and the soft-sampled
//! subgraph weights. Batching stacks all subjects' node rows for the MLP and
//! batch-norm stages (statistics over every node in the batch) and slices
//! them apart again for per-subject aggregation.

use alloc::vec::Vec;

use crate::tape::{DiffError, Tape, ValueId};
use crate::tensor::Tensor;

/// Batch-norm epsilon used throughout the encoder stack.
pub const BN_EPS: f64 = 1e-5;

/// Tape handles for one GIN layer's parameters.
///
/// Layer form: z = W2·relu(W1·u + b1) + b2 applied row-wise to
/// u_v = (1+ε)·h_v + Σ_u A_w[v,u]·h_u, then batch-norm, ReLU, dropout.
#[derive(Clone, Copy, Debug)]
pub struct GinLayerIds {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
    /// Learnable self-loop scale ε, a 1×1 tensor.
    pub eps: ValueId,
    pub bn_gamma: ValueId,
    pub bn_beta: ValueId,
}

/// Batch-norm statistics source for one layer of one forward pass.
pub enum BnUse<'a> {
    /// Training: normalize by this batch's statistics.
    Train,
    /// Evaluation: normalize by running statistics (1×d each).
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Result of a batched GIN forward pass.
pub struct GinEncoded {
    /// Final node representations per subject, n×d each.
    pub per_subject: Vec<ValueId>,
    /// The same representations stacked (B·n)×d.
    pub stacked: ValueId,
    /// Pre-batch-norm activations per layer, for running-stat updates.
    pub bn_inputs: Vec<ValueId>,
}

/// Two-layer (or deeper) GIN over a batch of subjects.
///
/// `features[s]` is subject s's node-feature matrix, `adjacency[s]` its
/// edge-weight matrix (binary A or soft γ). `dropout[l]` optionally carries a
/// pre-drawn 0/1 mask over the stacked (B·n)×d_out activation of layer `l`
/// with its keep probability.
pub fn gin_encode(
    tape: &mut Tape,
    features: &[ValueId],
    adjacency: &[ValueId],
    layers: &[GinLayerIds],
    bn: &[BnUse<'_>],
    dropout: &[Option<(&Tensor, f64)>],
) -> Result<GinEncoded, DiffError> {
    if features.is_empty() || features.len() != adjacency.len() {
        return Err(DiffError::Domain {
            op: "gin_encode",
            detail: alloc::format!(
                "{} feature matrices vs {} adjacencies",
                features.len(),
                adjacency.len()
            ),
        });
    }
    assert_eq!(layers.len(), bn.len());
    assert_eq!(layers.len(), dropout.len());

    let n = tape.value(features[0]).rows();
    let batch = features.len();
    let one = tape.constant(Tensor::scalar(1.0));
    let mut current: Vec<ValueId> = features.to_vec();
    let mut bn_inputs = Vec::with_capacity(layers.len());
    let mut stacked = features[0]; // overwritten below; batch is non-empty

    for (l, layer) in layers.iter().enumerate() {
        let one_plus_eps = tape.add(layer.eps, one)?;
        let mut combined = Vec::with_capacity(batch);
        for (s, &h) in current.iter().enumerate() {
            let agg = tape.matmul(adjacency[s], h)?;
            let scaled = tape.mul_scalar(h, one_plus_eps)?;
            combined.push(tape.add(scaled, agg)?);
        }
        let all = tape.concat_rows(&combined)?;
        let lin1 = tape.matmul(all, layer.w1)?;
        let lin1 = tape.add_row(lin1, layer.b1)?;
        let act1 = tape.relu(lin1);
        let lin2 = tape.matmul(act1, layer.w2)?;
        let z = tape.add_row(lin2, layer.b2)?;
        bn_inputs.push(z);

        let normed = match &bn[l] {
            BnUse::Train => tape.batchnorm_train(z, layer.bn_gamma, layer.bn_beta, BN_EPS)?,
            BnUse::Eval { mean, var } => tape.batchnorm_eval(
                z,
                layer.bn_gamma,
                layer.bn_beta,
                (*mean).clone(),
                (*var).clone(),
                BN_EPS,
            )?,
        };
        let activated = tape.relu(normed);
        let out = match dropout[l] {
            Some((mask, keep)) => tape.dropout(activated, mask.clone(), keep)?,
            None => activated,
        };

        stacked = out;
        current = (0..batch)
            .map(|s| tape.slice_rows(out, s * n, n))
            .collect::<Result<Vec<_>, _>>()?;
    }

    Ok(GinEncoded {
        per_subject: current,
        stacked,
        bn_inputs,
    })
}

/// Row-normalized adjacency for mean aggregation: row v is A[v,:]/deg(v), or
/// all zeros for isolated nodes.
pub fn row_normalized(a: &Tensor) -> Tensor {
    let (n, _) = a.shape();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        if deg > 0.0 {
            for j in 0..n {
                out.set(i, j, a.get(i, j) / deg);
            }
        }
    }
    out
}

/// High-pass layer: ĥ_v = h_v − (mean of neighbor rows)·W.
///
/// The neighbor mean comes from a pre-normalized constant adjacency
/// ([`row_normalized`]); the map is linear with no bias so isolated nodes
/// pass through exactly (zero aggregate ⇒ ĥ_v = h_v bitwise).
pub fn hpgnn_encode(
    tape: &mut Tape,
    h: ValueId,
    mean_adj: ValueId,
    w: ValueId,
) -> Result<ValueId, DiffError> {
    let agg = tape.matmul(mean_adj, h)?;
    let mapped = tape.matmul(agg, w)?;
    tape.sub(h, mapped)
}

/// X̂ = tanh(Ĥ·Ĥᵀ) ⊙ M. Symmetric whenever M is: the Gram matrix is
/// accumulated in the same term order for (i,j) and (j,i).
pub fn reconstruct(tape: &mut Tape, h_hat: ValueId, m: ValueId) -> Result<ValueId, DiffError> {
    let ht = tape.transpose(h_hat);
    let gram = tape.matmul(h_hat, ht)?;
    let squashed = tape.tanh(gram);
    tape.mul(squashed, m)
}

/// (1/n)·‖X̂ − X′‖²_F — note 1/n, not 1/n².
pub fn recon_loss(tape: &mut Tape, x_hat: ValueId, x_masked: ValueId) -> Result<ValueId, DiffError> {
    let n = tape.value(x_hat).rows();
    let diff = tape.sub(x_hat, x_masked)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmath;
    use crate::rng::DetRng;

    fn rand_t(r: usize, c: usize, seed: u64, scale: f64) -> Tensor {
        let mut rng = DetRng::new(seed);
        Tensor::from_fn(r, c, |_, _| rng.normal() * scale)
    }

    /// Parameters for one d_in→d layer, plus the tape ids, in one go.
    fn bind_layer(tape: &mut Tape, d_in: usize, d: usize, seed: u64) -> GinLayerIds {
        GinLayerIds {
            w1: tape.param(rand_t(d_in, d, seed, 0.4)),
            b1: tape.param(rand_t(1, d, seed + 1, 0.1)),
            w2: tape.param(rand_t(d, d, seed + 2, 0.4)),
            b2: tape.param(rand_t(1, d, seed + 3, 0.1)),
            eps: tape.param(Tensor::scalar(0.0)),
            bn_gamma: tape.param(Tensor::full(1, d, 1.0)),
            bn_beta: tape.param(Tensor::zeros(1, d)),
        }
    }

    fn ring_adjacency(n: usize) -> Tensor {
        let mut a = Tensor::zeros(n, n);
        for i in 0..n {
            let j = (i + 1) % n;
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    #[test]
    fn zero_adjacency_means_no_mixing() {
        // With A = 0, ε = 0, and fixed (not batch) normalization statistics,
        // each output row must equal the plain MLP chain on that row alone.
        let n = 5;
        let d = 3;
        let mut tape = Tape::new();
        let x0 = rand_t(n, n, 10, 0.8);
        let x = tape.constant(x0.clone());
        let a = tape.constant(Tensor::zeros(n, n));
        let layer = bind_layer(&mut tape, n, d, 20);
        let mean = Tensor::zeros(1, d);
        let var = Tensor::full(1, d, 1.0);
        let out = gin_encode(
            &mut tape,
            &[x],
            &[a],
            &[layer],
            &[BnUse::Eval {
                mean: &mean,
                var: &var,
            }],
            &[None],
        )
        .unwrap();

        let w1 = tape.value(layer.w1).clone();
        let b1 = tape.value(layer.b1).clone();
        let w2 = tape.value(layer.w2).clone();
        let b2 = tape.value(layer.b2).clone();
        let got = tape.value(out.per_subject[0]).clone();
        let bn_scale = 1.0 / fmath::sqrt(1.0 + BN_EPS);
        for v in 0..n {
            // One row through the MLP.
            let row = Tensor::new(1, n, x0.row(v).to_vec());
            let l1 = row.matmul(&w1).zip_map(&b1, |a, b| a + b).map(|x| x.max(0.0));
            let l2 = l1.matmul(&w2).zip_map(&b2, |a, b| a + b);
            for j in 0..d {
                let expect = (l2.get(0, j) * bn_scale).max(0.0);
                assert!(
                    (got.get(v, j) - expect).abs() < 1e-12,
                    "node {v} dim {j}: {} vs {expect}",
                    got.get(v, j)
                );
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let n = 8;
        let d = 4;
        let x0 = rand_t(n, n, 30, 0.8);
        let a0 = ring_adjacency(n);

        let run = |x_in: &Tensor, a_in: &Tensor| -> (Tensor, Vec<Tensor>) {
            let mut tape = Tape::new();
            let x = tape.constant(x_in.clone());
            let a = tape.constant(a_in.clone());
            let l1 = bind_layer(&mut tape, n, d, 40);
            let l2 = bind_layer(&mut tape, d, d, 50);
            let out = gin_encode(
                &mut tape,
                &[x],
                &[a],
                &[l1, l2],
                &[BnUse::Train, BnUse::Train],
                &[None, None],
            )
            .unwrap();
            let h = tape.value(out.per_subject[0]).clone();
            (h, Vec::new())
        };

        let (h_base, _) = run(&x0, &a0);
        let mut rng = DetRng::new(60);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            // Permute node order: feature vectors travel with their nodes
            // (rows permute, columns stay) and A permutes on both axes.
            let xp = Tensor::from_fn(n, n, |i, j| x0.get(perm[i], j));
            let ap = Tensor::from_fn(n, n, |i, j| a0.get(perm[i], perm[j]));
            let (h_perm, _) = run(&xp, &ap);
            let mut worst = 0.0f64;
            for v in 0..n {
                for j in 0..d {
                    worst = worst.max((h_perm.get(v, j) - h_base.get(perm[v], j)).abs());
                }
            }
            assert!(worst < 1e-9, "equivariance violated by {worst}");
        }
    }

    #[test]
    fn integer_weights_equal_duplicated_edges() {
        // Aggregation with integer weights must equal adding each neighbor
        // w times. Dyadic feature values keep every partial sum exact.
        let n = 6;
        let d = 4;
        let steps = [0.0, 0.5, -0.25, 1.0, -0.5, 0.75];
        let h = Tensor::from_fn(n, d, |i, j| steps[(i + 2 * j) % steps.len()]);
        let mut w = Tensor::zeros(n, n);
        let mut rng = DetRng::new(70);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.below(4) as f64;
                w.set(i, j, v);
                w.set(j, i, v);
            }
        }
        let mut tape = Tape::new();
        let hid = tape.constant(h.clone());
        let wid = tape.constant(w.clone());
        let agg = tape.matmul(wid, hid).unwrap();

        let mut naive = Tensor::zeros(n, d);
        for v in 0..n {
            for u in 0..n {
                for _ in 0..(w.get(v, u) as usize) {
                    for j in 0..d {
                        let cur = naive.get(v, j);
                        naive.set(v, j, cur + h.get(u, j));
                    }
                }
            }
        }
        assert_eq!(tape.value(agg), &naive);
    }

    #[test]
    fn hpgnn_constant_signal_vanishes_on_connected_nodes() {
        let n = 6;
        let d = 3;
        let a = ring_adjacency(n);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(n, d, |_, j| 0.3 * j as f64 - 0.2));
        let mean_adj = tape.constant(row_normalized(&a));
        let w = tape.param(Tensor::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 }));
        let out = hpgnn_encode(&mut tape, h, mean_adj, w).unwrap();
        assert!(tape.value(out).max_abs() < 1e-12);
    }

    #[test]
    fn hpgnn_no_edges_is_identity() {
        let n = 5;
        let d = 4;
        let mut tape = Tape::new();
        let h0 = rand_t(n, d, 80, 1.0);
        let h = tape.constant(h0.clone());
        let mean_adj = tape.constant(row_normalized(&Tensor::zeros(n, n)));
        let w = tape.param(rand_t(d, d, 81, 0.7));
        let out = hpgnn_encode(&mut tape, h, mean_adj, w).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn hpgnn_matches_naive_loop() {
        let n = 7;
        let d = 3;
        let mut a = ring_adjacency(n);
        a.set(0, 3, 1.0);
        a.set(3, 0, 1.0);
        let h0 = rand_t(n, d, 90, 0.9);
        let w0 = rand_t(d, d, 91, 0.6);

        let mut tape = Tape::new();
        let h = tape.constant(h0.clone());
        let mean_adj = tape.constant(row_normalized(&a));
        let w = tape.param(w0.clone());
        let out = hpgnn_encode(&mut tape, h, mean_adj, w).unwrap();
        let got = tape.value(out);

        for v in 0..n {
            let neighbors: Vec<usize> = (0..n).filter(|&u| a.get(v, u) != 0.0).collect();
            for j in 0..d {
                let mut mean_k = [0.0; 8];
                for &u in &neighbors {
                    for (k, mk) in mean_k.iter_mut().enumerate().take(d) {
                        *mk += h0.get(u, k) / neighbors.len() as f64;
                    }
                }
                let mut mapped = 0.0;
                for k in 0..d {
                    mapped += mean_k[k] * w0.get(k, j);
                }
                let expect = h0.get(v, j) - mapped;
                assert!((got.get(v, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruct_zero_and_orthonormal_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(4, 3));
        let m = tape.constant(Tensor::full(4, 4, 1.0));
        let x_hat = reconstruct(&mut tape, z, m).unwrap();
        assert_eq!(tape.value(x_hat).max_abs(), 0.0);

        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(4, 4, |i, j| f64::from(i == j)));
        let m = tape.constant(Tensor::full(4, 4, 1.0));
        let x_hat = reconstruct(&mut tape, eye, m).unwrap();
        let t1 = fmath::tanh(1.0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { t1 } else { 0.0 };
                assert_eq!(tape.value(x_hat).get(i, j), expect);
            }
        }
    }

    #[test]
    fn reconstruction_symmetric_to_zero_ulps() {
        for seed in 0..20 {
            let mut tape = Tape::new();
            let h = tape.param(rand_t(6, 3, 1000 + seed, 0.8));
            let mut sym = rand_t(6, 6, 2000 + seed, 0.5);
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let v = sym.get(i, j);
                    sym.set(j, i, v);
                }
            }
            let m = tape.constant(sym);
            let x_hat = reconstruct(&mut tape, h, m).unwrap();
            assert!(tape.value(x_hat).is_symmetric());
        }
    }

    #[test]
    fn recon_loss_identities_and_oracle() {
        let mut tape = Tape::new();
        let a = tape.constant(rand_t(5, 5, 300, 0.7));
        let same = recon_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        // Constant difference c in every cell: loss = n²·c²/n = n·c².
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(5, 5));
        let y = tape.constant(Tensor::full(5, 5, 0.3));
        let loss = recon_loss(&mut tape, x, y).unwrap();
        assert!((tape.value(loss).item() - 5.0 * 0.09).abs() < 1e-12);

        let x0 = rand_t(5, 5, 301, 0.7);
        let y0 = rand_t(5, 5, 302, 0.7);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = tape.constant(y0.clone());
        let loss = recon_loss(&mut tape, x, y).unwrap();
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let d = x0.get(i, j) - y0.get(i, j);
                naive += d * d;
            }
        }
        naive /= 5.0;
        assert!((tape.value(loss).item() - naive).abs() < 1e-12);
    }

    #[test]
    fn recon_path_gradients_match_finite_differences() {
        // Full selector → GIN → high-pass → reconstruction chain on a small
        // instance; every parameter checked against central differences.
        let n = 8;
        let d = 4;
        let x0 = {
            let mut rng = DetRng::new(400);
            let mut x = Tensor::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = if i == j { 1.0 } else { rng.range(-0.9, 0.9) };
                    x.set(i, j, v);
                    x.set(j, i, v);
                }
            }
            x
        };
        let a0 = ring_adjacency(n);
        let init: Vec<Tensor> = vec![
            rand_t(n, d, 401, 0.5),  // w_mask
            rand_t(n, d, 402, 0.4),  // gin w1
            rand_t(1, d, 403, 0.1),  // gin b1
            rand_t(d, d, 404, 0.4),  // gin w2
            rand_t(1, d, 405, 0.1),  // gin b2
            Tensor::scalar(0.1),     // eps
            Tensor::full(1, d, 1.0), // bn gamma
            Tensor::zeros(1, d),     // bn beta
            rand_t(d, d, 406, 0.4),  // hpgnn w
        ];

        let build = |p: &[Tensor]| -> (Tape, Vec<ValueId>, ValueId) {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let a = tape.constant(a0.clone());
            let ids: Vec<ValueId> = p.iter().map(|t| tape.param(t.clone())).collect();
            let mask = crate::selector::apply_mask(&mut tape, x, ids[0], None).unwrap();
            let layer = GinLayerIds {
                w1: ids[1],
                b1: ids[2],
                w2: ids[3],
                b2: ids[4],
                eps: ids[5],
                bn_gamma: ids[6],
                bn_beta: ids[7],
            };
            let enc = gin_encode(
                &mut tape,
                &[mask.x_masked],
                &[a],
                &[layer],
                &[BnUse::Train],
                &[None],
            )
            .unwrap();
            let mean_adj = tape.constant(row_normalized(&a0));
            let h_hat = hpgnn_encode(&mut tape, enc.per_subject[0], mean_adj, ids[8]).unwrap();
            let x_hat = reconstruct(&mut tape, h_hat, mask.m).unwrap();
            let loss = recon_loss(&mut tape, x_hat, mask.x_masked).unwrap();
            let loss = tape.scale(loss, 0.1); // λ2-weighted, as used in training
            (tape, ids, loss)
        };

        let (tape, ids, loss) = build(&init);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Option<&Tensor>> = ids.iter().map(|&id| grads.get(id)).collect();
        let mut params: Vec<Tensor> = init.clone();
        let report = GradCheck::default().run(&mut params, &analytic, |p| {
            let (t, _, l) = build(p);
            t.value(l).item()
        });
        assert!(report.worst() < 1e-4, "worst rel err {}", report.worst());
    }

    use crate::gradcheck::GradCheck;
}
