use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId, crate::StpsError> {
    let w = random(g.shape(y), seed);
    let w = g.constant(w);
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let yf = g.reshape(y, vec![1, n])?;
    let wf = g.reshape(w, vec![n, 1])?;
    let s = g.matmul(yf, wf)?;
    g.reshape(s, vec![1])
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = g.constant(Tensor::eye(2));
    let z = g.constant(Tensor::zeros([2, 2]));
    let ai = g.matmul(a, i).unwrap();
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(g.value(az).data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let b = t(&[&[5.0], &[6.0]]);
    let err = grad_check(
        |g, a| {
            let b = g.constant(b.clone());
            let ab = g.matmul(a, b)?;
            Ok(g.sum(ab))
        },
        &t(&[&[1.0, 2.0], &[3.0, 4.0]]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batched_matmul_gradients_both_sides() {
    // batched × batched, batched × unbatched, unbatched × batched
    let cases: [(&[usize], &[usize]); 3] = [(&[2, 3, 4], &[2, 4, 2]), (&[2, 3, 4], &[4, 2]), (&[3, 4], &[2, 4, 2])];
    for (k, (sa, sb)) in cases.into_iter().enumerate() {
        let a0 = random(sa, 10 + k as u64);
        let b0 = random(sb, 20 + k as u64);
        let ea = grad_check(
            |g, a| {
                let b = g.constant(b0.clone());
                let y = g.matmul(a, b)?;
                weighted_sum(g, y, 3)
            },
            &a0,
            1e-5,
        )
        .unwrap();
        let eb = grad_check(
            |g, b| {
                let a = g.constant(a0.clone());
                let y = g.matmul(a, b)?;
                weighted_sum(g, y, 3)
            },
            &b0,
            1e-5,
        )
        .unwrap();
        assert!(ea < 1e-8 && eb < 1e-8, "case {k}: {ea} {eb}");
    }
}

#[test]
fn transpose_values_involution_and_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let at = g.transpose(a).unwrap();
    assert_eq!(g.value(at).data(), &[1.0, 3.0, 2.0, 4.0]);

    let r = random(&[3, 5], 1);
    let x = g.constant(r.clone());
    let x1 = g.transpose(x).unwrap();
    let x2 = g.transpose(x1).unwrap();
    assert_eq!(g.value(x2), &r);

    let v = g.constant(Tensor::zeros([3]));
    assert!(g.transpose(v).is_err());

    let err = grad_check(
        |g, x| {
            let y = g.transpose(x)?;
            weighted_sum(g, y, 5)
        },
        &random(&[2, 3, 4], 2),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn add_scale_and_blend() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let z = g.scale(a, 0.0).unwrap();
    assert_eq!(g.value(z).data(), &[0.0, 0.0]);
    assert!(g.scale(a, f64::NAN).is_err());

    let x = g.constant(Tensor::scalar(2.0));
    let y = g.constant(Tensor::scalar(4.0));
    let xa = g.scale(x, 0.5).unwrap();
    let yb = g.scale(y, 1.0 - 0.5).unwrap();
    let mid = g.add(xa, yb).unwrap();
    assert_eq!(g.value(mid).data(), &[3.0]);

    let c = g.constant(Tensor::zeros([3]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn broadcast_add_gradients() {
    let b0 = random(&[3, 4], 7);
    let e1 = grad_check(
        |g, a| {
            let b = g.constant(b0.clone());
            let y = g.broadcast_add(a, b)?;
            weighted_sum(g, y, 1)
        },
        &random(&[2, 3, 4], 8),
        1e-5,
    )
    .unwrap();
    let a0 = random(&[2, 3, 4], 8);
    let e2 = grad_check(
        |g, b| {
            let a = g.constant(a0.clone());
            let y = g.broadcast_add(a, b)?;
            weighted_sum(g, y, 1)
        },
        &random(&[3, 1], 9),
        1e-5,
    )
    .unwrap();
    assert!(e1 < 1e-8 && e2 < 1e-8, "{e1} {e2}");

    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2]));
    assert!(g.broadcast_add(a, b).is_err());
}

#[test]
fn concat_features_values_widths_and_gradient() {
    let mut g = Graph::<f64>::new();
    let parts: Vec<_> = [1.0, 2.0, 3.0]
        .iter()
        .map(|&v| g.constant(t(&[&[v]])))
        .collect();
    let c = g.concat_features(&parts).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

    let d = 64;
    let parts: Vec<_> = (0..5).map(|_| g.constant(Tensor::zeros([7, d]))).collect();
    let c = g.concat_features(&parts).unwrap();
    assert_eq!(g.shape(c), &[7, 5 * d]);

    let bad = g.constant(Tensor::zeros([6, d]));
    assert!(g.concat_features(&[parts[0], bad]).is_err());

    let other = random(&[2, 3, 2], 4);
    let err = grad_check(
        |g, x| {
            let o = g.constant(other.clone());
            let y = g.concat_features(&[x, o, x])?;
            weighted_sum(g, y, 2)
        },
        &random(&[2, 3, 3], 5),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);

    let err = grad_check(
        |g, x| {
            let o = g.constant(other.clone());
            let y = g.concat(&[o, x], 1)?;
            weighted_sum(g, y, 2)
        },
        &random(&[2, 4, 2], 5),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn relu_values_idempotence_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let rr = g.relu(r);
    assert_eq!(g.value(rr), g.value(r));

    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64([2], &[-1.0, 2.0]).unwrap());
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);

    // Subgradient at exactly 0 is 0.
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(0.0));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
}

#[test]
fn dropout_identity_cases_and_rate_bounds() {
    let x0 = random(&[4, 5], 3);
    let mut g = Graph::<f64>::training(ChaCha8Rng::seed_from_u64(1));
    let x = g.constant(x0.clone());
    let y = g.dropout(x, 0.0).unwrap();
    assert_eq!(g.value(y), &x0);
    assert!(g.dropout(x, 1.0).is_err());
    assert!(g.dropout(x, -0.1).is_err());

    let mut g = Graph::<f64>::new();
    let x = g.constant(x0.clone());
    let y = g.dropout(x, 0.15).unwrap();
    assert_eq!(g.value(y), &x0);
}

#[test]
fn dropout_preserves_mean_in_expectation() {
    let n = 100_000;
    let mut g = Graph::<f64>::training(ChaCha8Rng::seed_from_u64(42));
    let x = g.constant(Tensor::full([n], 1.0));
    let y = g.dropout(x, 0.15).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
    assert!((zeros as f64 / n as f64 - 0.15).abs() < 0.01);
}

#[test]
fn dropout_mask_drives_backward() {
    let mut g = Graph::<f64>::training(ChaCha8Rng::seed_from_u64(3));
    let x = g.variable(Tensor::full([1000], 2.0));
    let y = g.dropout(x, 0.5).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    for (gx, yv) in g.grad(x).unwrap().data().iter().zip(g.value(y).data()) {
        assert_eq!(*gx * 2.0, *yv);
    }
}

#[test]
fn embedding_lookup_gather_scatter_and_bounds() {
    let mut g = Graph::<f64>::new();
    let bank = g.variable(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let e = g.embedding_lookup(bank, &[2, 0]).unwrap();
    assert_eq!(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0]);

    let e = g.embedding_lookup(bank, &[1, 1]).unwrap();
    let s = g.sum(e);
    g.backward(s).unwrap();
    assert_eq!(g.grad(bank).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

    let tod = g.constant(Tensor::zeros([288, 4]));
    assert!(g.embedding_lookup(tod, &[287]).is_ok());
    let err = g.embedding_lookup(tod, &[288]).unwrap_err().to_string();
    assert!(err.contains("288"), "{err}");
}

#[test]
fn affine_values_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[&[0.3, -1.2]]));
    let w = g.constant(Tensor::eye(2));
    let b = g.constant(Tensor::zeros([2]));
    let y = affine(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.3, -1.2]);

    let x = g.constant(Tensor::from_f64([2], &[1.0, 1.0]).unwrap());
    let w = g.constant(t(&[&[1.0], &[1.0]]));
    let b = g.constant(Tensor::from_f64([1], &[0.5]).unwrap());
    let y = affine(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);

    let bad = g.constant(Tensor::zeros([3, 1]));
    assert!(affine(&mut g, x, bad, b).is_err());

    let mut store = ParameterStore::new();
    store.insert("w", random(&[3, 4], 11)).unwrap();
    store.insert("b", random(&[4], 12)).unwrap();
    let x0 = random(&[2, 3], 13);
    let checks = grad_check_store(
        &store,
        None,
        |g, s| {
            let x = g.constant(x0.clone());
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = affine(g, x, w, b)?;
            weighted_sum(g, y, 14)
        },
        1e-5,
    )
    .unwrap();
    for c in checks {
        assert!(c.max_rel_error < 1e-8, "{c:?}");
    }
}

fn block_store(block: &ResidualBlock, seed: u64) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store
}

#[test]
fn residual_block_identity_cases() {
    let block = ResidualBlock::new("blk", 3, 4, 3);
    let mut store = block_store(&block, 1);
    *store.value_mut("blk.fc2.w").unwrap() = Tensor::zeros([4, 3]);
    *store.value_mut("blk.fc2.b").unwrap() = Tensor::zeros([3]);
    let x0 = random(&[5, 3], 2);
    let mut g = Graph::new();
    let x = g.constant(x0.clone());
    let y = block.forward(&mut g, &store, x, 0.15).unwrap();
    assert_eq!(g.value(y), &x0);

    let block = ResidualBlock::new("sq", 3, 3, 3);
    let mut store = block_store(&block, 1);
    *store.value_mut("sq.fc1.w").unwrap() = Tensor::eye(3);
    *store.value_mut("sq.fc1.b").unwrap() = Tensor::zeros([3]);
    let neg = random(&[4, 3], 3).map(|v| -v.abs() - 0.1);
    let mut g = Graph::new();
    let x = g.constant(neg.clone());
    let y = block.forward(&mut g, &store, x, 0.0).unwrap();
    assert_eq!(g.value(y), &neg);
}

#[test]
fn residual_block_gradient_check_with_projection() {
    let block = ResidualBlock::new("blk", 3, 5, 2);
    assert!(block.has_skip());
    let store = block_store(&block, 9);
    let x0 = random(&[4, 3], 10);
    let f = |g: &mut Graph<f64>, s: &ParameterStore<f64>| {
        let x = g.constant(x0.clone());
        let y = block.forward(g, s, x, 0.15)?;
        weighted_sum(g, y, 6)
    };
    let at = |step| {
        grad_check_store(&store, None, f, step)
            .unwrap()
            .into_iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (at(1e-5), at(1e-4));
    assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");

    // width mismatch inside params
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, 4]));
    assert!(block.forward(&mut g, &store, x, 0.0).is_err());
}

#[test]
fn backward_fan_out_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let xx = g.add(x, x).unwrap();
    let s = g.sum(xx);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);

    let x0 = random(&[4], 2);
    let mut g1 = Graph::<f64>::new();
    let x = g1.variable(x0.clone());
    let a = g1.add(x, x).unwrap();
    let a = g1.add(a, x).unwrap();
    let s = g1.sum(a);
    g1.backward(s).unwrap();
    let mut g2 = Graph::<f64>::new();
    let y = g2.variable(x0);
    let b = g2.scale(y, 3.0).unwrap();
    let s = g2.sum(b);
    g2.backward(s).unwrap();
    assert_eq!(g1.grad(x), g2.grad(y));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros([2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn mean_abs_error_values_and_gradient() {
    let truth = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let p = g.variable(Tensor::from_f64([3], &[2.0, 4.0, 3.0]).unwrap());
    let l = g.mean_abs_error(p, &truth).unwrap();
    assert_eq!(g.value(l).data(), &[1.0]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[1.0 / 3.0, 1.0 / 3.0, 0.0]);
}

#[test]
fn grad_check_closed_form_and_linear() {
    let e = grad_check(
        |g, x| {
            let xt = g.reshape(x, vec![1, 2])?;
            let xc = g.reshape(x, vec![2, 1])?;
            let s = g.matmul(xt, xc)?;
            g.reshape(s, vec![1])
        },
        &Tensor::from_f64([2], &[1.0, 2.0]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-8, "{e}");

    let e = grad_check(
        |g, x| {
            let y = g.scale(x, 3.0)?;
            Ok(g.sum(y))
        },
        &random(&[6], 1),
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-9, "{e}");
}

#[test]
fn f32_graph_runs_forward_and_backward() {
    let mut g = Graph::<f32>::new();
    let a = g.variable(Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(Tensor::<f32>::from_rows(&[&[5.0], &[6.0]]));
    let y = g.matmul(a, b).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[5.0f32, 6.0, 5.0, 6.0]);
}

#[test]
fn forward_is_bit_deterministic_per_seed() {
    let block = ResidualBlock::new("b", 4, 6, 3);
    let store = block_store(&block, 5);
    let x0 = random(&[8, 4], 6);
    let run = || {
        let mut g = Graph::training(ChaCha8Rng::seed_from_u64(77));
        let x = g.constant(x0.clone());
        let y = block.forward(&mut g, &store, x, 0.15).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn weighted_gather_matches_gather_then_contract() {
    let bank0 = random(&[5, 3], 1);
    let w0 = random(&[4, 1], 2);
    let idx = [0, 4, 4, 2, 1, 1, 3, 0];
    let mut g = Graph::new();
    let (bank, w) = (g.constant(bank0), g.constant(w0));
    let fused = g.weighted_gather(bank, w, &idx).unwrap();
    let rows = g.embedding_lookup(bank, &idx).unwrap();
    let rows = g.reshape(rows, vec![2, 4, 3]).unwrap();
    let rows = g.transpose(rows).unwrap();
    let reference = g.matmul(rows, w).unwrap();
    let reference = g.reshape(reference, vec![2, 3]).unwrap();
    assert_eq!(g.shape(fused), &[2, 3]);
    assert!(g.value(fused).max_abs_diff(g.value(reference)) < 1e-14);
    assert!(matches!(
        g.weighted_gather(bank, w, &[0, 1, 2, 5]),
        Err(crate::StpsError::Bounds { what: "embedding bank", index: 5, bound: 5 })
    ));
    assert!(g.weighted_gather(bank, w, &[0, 1, 2]).is_err());
}

#[test]
fn weighted_gather_gradients() {
    let idx = [0, 3, 3, 2, 1, 2];
    let w0 = random(&[3, 1], 5);
    let bank0 = random(&[4, 2], 6);
    let err = grad_check(
        |g, bank| {
            let w = g.constant(w0.clone());
            let y = g.weighted_gather(bank, w, &idx)?;
            weighted_sum(g, y, 7)
        },
        &bank0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "bank {err}");
    let err = grad_check(
        |g, w| {
            let bank = g.constant(bank0.clone());
            let y = g.weighted_gather(bank, w, &idx)?;
            weighted_sum(g, y, 7)
        },
        &w0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "weights {err}");
}
