//! Finite-difference and dense-oracle checks for every layer primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{numeric_grads, rel_err};
use super::layers::{self, init_block, init_layer_norm, init_linear};
use super::*;
use crate::error::Error;

const FD_H: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-4;
const FD_TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn randomize(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
}

/// Max relative error between analytic and central-difference gradients.
fn check(params: &ParamSet<f64>, mut build: impl for<'p> FnMut(&mut Graph<'p, f64>, &'p ParamSet<f64>) -> NodeId) -> f64 {
    assert!(params.num_elements() <= 2000);
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    let analytic = g.backward(loss).unwrap().for_params(params);
    let numeric = numeric_grads(params, FD_H, |p| {
        let mut g = Graph::new();
        let l = build(&mut g, p);
        g.value(l).data()[0]
    });
    numeric
        .iter()
        .map(|(name, i, n)| rel_err(analytic.get(name).unwrap().data()[*i], *n, FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Reduces an arbitrary output to a scalar with a fixed random projection so
/// every output element contributes a distinct weight.
fn project<'p>(g: &mut Graph<'p, f64>, y: NodeId, seed: u64) -> NodeId {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(rand_tensor(&mut rng, shape, 1.0));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn selu_reference_values() {
    let x = Tensor::<f64>::new(vec![3], vec![0.0, 1.0, -20.0]).unwrap();
    let y = selu(&x);
    assert_eq!(y.data()[0], 0.0);
    // Independent scalar evaluation from the constants.
    let lam = 1.0507009873554805_f64;
    let alpha = 1.6732632423543772_f64;
    assert!((y.data()[1] - lam).abs() < 1e-15);
    assert!((y.data()[1] - 1.0507).abs() < 1e-4);
    let neg = lam * alpha * ((-20.0f64).exp() - 1.0);
    assert!((y.data()[2] - neg).abs() < 1e-12);
    assert!((y.data()[2] + 1.7581).abs() < 1e-4);
    assert!((y.data()[2] + lam * alpha).abs() < 1e-6);
}

/// Dense per-head attention computed with explicit loops.
fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (s, w) = q.matrix_dims();
    let hd = w / heads;
    let mut out = vec![0.0; s * w];
    for h in 0..heads {
        for i in 0..s {
            let mut logits = vec![0.0; s];
            for j in 0..s {
                let mut dot = 0.0;
                for c in 0..hd {
                    dot += q.data()[i * w + h * hd + c] * k.data()[j * w + h * hd + c];
                }
                logits[j] = dot / (hd as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                out[i * w + h * hd + c] = (0..s).map(|j| e[j] / z * v.data()[j * w + h * hd + c]).sum();
            }
        }
    }
    out
}

fn dense_linear(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (k, n) = w.matrix_dims();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] = b.data()[j] + (0..k).map(|i| x[r * k + i] * w.data()[i * n + j]).sum::<f64>();
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, k, v) = (
        rand_tensor(&mut rng, vec![4, 6], 1.0),
        rand_tensor(&mut rng, vec![4, 6], 1.0),
        rand_tensor(&mut rng, vec![4, 6], 1.0),
    );
    let wo = rand_tensor(&mut rng, vec![6, 6], 0.5);
    let bo = rand_tensor(&mut rng, vec![6], 0.5);
    let mut g = Graph::<f64>::new();
    let (qi, ki, vi, woi, boi) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()), g.input(wo.clone()), g.input(bo.clone()));
    let y = layers::multi_head_attention(&mut g, qi, ki, vi, 2, 4, woi, boi).unwrap();
    let expect = dense_linear(&attention_oracle(&q, &k, &v, 2), 4, &wo, &bo);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-5);
    }
    // f32 path against the same oracle.
    let mut g32 = Graph::<f32>::new();
    let ids: Vec<NodeId> = [&q, &k, &v, &wo, &bo].iter().map(|t| g32.input(t.cast())).collect();
    let y32 = layers::multi_head_attention(&mut g32, ids[0], ids[1], ids[2], 2, 4, ids[3], ids[4]).unwrap();
    for (a, b) in g32.value(y32).data().iter().zip(&expect) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn attention_single_token_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q, k, v) = (
        rand_tensor(&mut rng, vec![1, 4], 1.0),
        rand_tensor(&mut rng, vec![1, 4], 1.0),
        rand_tensor(&mut rng, vec![1, 4], 1.0),
    );
    let wo = rand_tensor(&mut rng, vec![4, 4], 1.0);
    let bo = rand_tensor(&mut rng, vec![4], 1.0);
    let mut g = Graph::<f64>::new();
    let (qi, ki, vi, woi, boi) = (g.input(q), g.input(k), g.input(v.clone()), g.input(wo.clone()), g.input(bo.clone()));
    let y = layers::multi_head_attention(&mut g, qi, ki, vi, 2, 1, woi, boi).unwrap();
    let expect = dense_linear(v.data(), 1, &wo, &bo);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_zero_query_averages_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = rand_tensor(&mut rng, vec![5, 4], 1.0);
    let v = rand_tensor(&mut rng, vec![5, 4], 1.0);
    let mut g = Graph::<f64>::new();
    let (qi, ki, vi) = (g.input(Tensor::zeros(vec![5, 4])), g.input(k), g.input(v.clone()));
    let a = g.attention(qi, ki, vi, 2, 5).unwrap();
    let probs = g.attention_probs(a).unwrap();
    assert!(probs.iter().all(|p| (p - 0.2).abs() < 1e-12));
    for c in 0..4 {
        let mean: f64 = (0..5).map(|r| v.data()[r * 4 + c]).sum::<f64>() / 5.0;
        for r in 0..5 {
            assert!((g.value(a).data()[r * 4 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(vec![2, 6]));
    assert!(matches!(g.attention(x, x, x, 4, 2), Err(Error::Config(_))));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let q = g.input(rand_tensor(&mut rng, vec![12, 8], 30.0).cast());
    let k = g.input(rand_tensor(&mut rng, vec![12, 8], 30.0).cast());
    let a = g.attention(q, k, k, 2, 6).unwrap();
    for row in g.attention_probs(a).unwrap().chunks(6) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamSet::<f32>::new();
    init_layer_norm(&mut p, "ln", 32).unwrap();
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&mut rng, vec![7, 32], 5.0).cast());
    let y = layers::layer_norm(&mut g, &p, "ln", x).unwrap();
    for row in g.value(y).data().chunks(32) {
        let mean = row.iter().map(|v| *v as f64).sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(vec![2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut p = ParamSet::<f64>::new();
    init_linear(&mut p, "fc", 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let c = g.input(Tensor::scalar(4.0));
    let grads = g.backward(c).unwrap().for_params(&p);
    assert_eq!(grads.len(), 2);
    for (_, t) in grads.iter() {
        assert!(t.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn sum_of_squares_gradient_is_twice_weight() {
    let mut p = ParamSet::<f64>::new();
    p.insert("w", rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), vec![3, 4], 1.0)).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let gw = grads.params().get("w").unwrap();
    for (a, b) in gw.data().iter().zip(p.get("w").unwrap().data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut p = ParamSet::<f64>::new();
    init_linear(&mut p, "a", 3, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    init_linear(&mut p, "b", 3, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    p.freeze("a");
    let mut g = Graph::new();
    let x = g.input(Tensor::full(vec![2, 3], 0.5));
    let h = layers::linear(&mut g, &p, "a", x).unwrap();
    let y = layers::linear(&mut g, &p, "b", h).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.params().get("a.w").is_none());
    assert!(grads.params().get("b.w").is_some());
    let full = grads.for_params(&p);
    assert!(full.get("a.w").is_none());
}

#[test]
fn fd_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut p = ParamSet::new();
    init_linear(&mut p, "fc", 5, 4, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.5);
    let x = rand_tensor(&mut rng, vec![3, 5], 1.0);
    let err = check(&p, |g, p| {
        let xi = g.input(x.clone());
        let y = layers::linear(g, p, "fc", xi).unwrap();
        project(g, y, 1)
    });
    assert!(err < FD_TOL, "linear rel err {err}");
}

#[test]
fn fd_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ParamSet::new();
    init_layer_norm(&mut p, "ln", 6).unwrap();
    randomize(&mut p, &mut rng, 0.5);
    p.insert("x", rand_tensor(&mut rng, vec![4, 6], 2.0)).unwrap();
    let err = check(&p, |g, p| {
        let xi = g.param(p, "x").unwrap();
        let y = layers::layer_norm(g, p, "ln", xi).unwrap();
        project(g, y, 2)
    });
    assert!(err < FD_TOL, "layer norm rel err {err}");
}

#[test]
fn fd_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut p = ParamSet::new();
    init_linear(&mut p, "attn.q", 6, 6, &mut rng).unwrap();
    init_linear(&mut p, "attn.k", 6, 6, &mut rng).unwrap();
    init_linear(&mut p, "attn.v", 6, 6, &mut rng).unwrap();
    init_linear(&mut p, "attn.o", 6, 6, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.6);
    p.insert("x", rand_tensor(&mut rng, vec![8, 6], 1.0)).unwrap();
    let err = check(&p, |g, p| {
        let xi = g.param(p, "x").unwrap();
        // two sequences of four tokens, three heads
        let y = layers::self_attention(g, p, "attn", xi, 3, 4).unwrap();
        project(g, y, 3)
    });
    assert!(err < FD_TOL, "attention rel err {err}");
}

#[test]
fn fd_transformer_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut p = ParamSet::new();
    init_block(&mut p, "blk", 6, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.3);
    p.insert("x", rand_tensor(&mut rng, vec![6, 6], 1.0)).unwrap();
    let err = check(&p, |g, p| {
        let xi = g.param(p, "x").unwrap();
        let y = layers::transformer_block(g, p, "blk", xi, 2, 3).unwrap();
        project(g, y, 4)
    });
    assert!(err < FD_TOL, "block rel err {err}");
}

#[test]
fn fd_mlp_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut p = ParamSet::new();
    init_linear(&mut p, "mlp.fc1", 4, 16, &mut rng).unwrap();
    init_linear(&mut p, "mlp.fc2", 16, 4, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.8);
    let x = rand_tensor(&mut rng, vec![3, 4], 2.0);
    let err = check(&p, |g, p| {
        let xi = g.input(x.clone());
        let y = layers::mlp(g, p, "mlp", xi).unwrap();
        project(g, y, 5)
    });
    assert!(err < FD_TOL, "mlp rel err {err}");
}

#[test]
fn fd_patch_embedding() {
    // Patch embedding is a linear map over gathered patch rows plus a
    // gathered positional table.
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut p = ParamSet::new();
    init_linear(&mut p, "pe", 12, 5, &mut rng).unwrap();
    p.insert("pos", rand_tensor(&mut rng, vec![5, 5], 0.5)).unwrap();
    randomize(&mut p, &mut rng, 0.5);
    let patches = rand_tensor(&mut rng, vec![4, 12], 1.0);
    let err = check(&p, |g, p| {
        let x = g.input(patches.clone());
        let x = g.gather_rows(x, vec![0, 2, 3]).unwrap();
        let e = layers::linear(g, p, "pe", x).unwrap();
        let pos = g.param(p, "pos").unwrap();
        let pos = g.gather_rows(pos, vec![1, 3, 4]).unwrap();
        let y = g.add(e, pos).unwrap();
        project(g, y, 6)
    });
    assert!(err < FD_TOL, "patch embed rel err {err}");
}

#[test]
fn fd_selu_heads_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut p = ParamSet::new();
    init_linear(&mut p, "a", 3, 4, &mut rng).unwrap();
    init_linear(&mut p, "b", 3, 4, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 1.0);
    let x = rand_tensor(&mut rng, vec![5, 3], 1.5);
    let target = rand_tensor(&mut rng, vec![5, 3], 1.0);
    let labels = [0usize, 2, 1, 2, 0];
    let bce_t = [1.0, 0.0, 1.0, 1.0, 0.0];
    let err = check(&p, |g, p| {
        let xi = g.input(x.clone());
        let ha = layers::linear(g, p, "a", xi).unwrap();
        let ha = g.selu(ha);
        let hb = layers::linear(g, p, "b", xi).unwrap();
        let h = g.concat_cols(&[ha, hb]).unwrap();
        let reg = g.slice_cols(h, 0, 3).unwrap();
        let l1 = g.mse(reg, &target).unwrap();
        let logits = g.slice_cols(h, 4, 7).unwrap();
        let l2 = g.softmax_cross_entropy(logits, &labels).unwrap();
        let bl = g.slice_cols(h, 7, 8).unwrap();
        let l3 = g.bce_with_logits(bl, &bce_t).unwrap();
        let rows = g.concat_rows(&[l1, l2, l3]).unwrap();
        let s = g.scale(rows, 0.7);
        g.mean(s)
    });
    assert!(err < FD_TOL, "heads rel err {err}");
}

#[test]
fn input_gradients_are_reported() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 2], vec![1.0, -3.0]).unwrap().with_requires_grad(true));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.input(x).unwrap().data(), &[2.0, -6.0]);
}
