//! Node-embedding-enhanced spatial transfer matrices and their application.
//!
//! A transfer matrix maps a representation over source locations to
//! destination locations: `out = head(A′ᵀ · H′)` with
//! `A′ = A_sub + (E + B_src)·B_dstᵀ`.

use crate::diffcore::{Graph, NodeId, ParameterStore, ResidualBlock};
use crate::error::{Result, StpsError};
use crate::scalar::Scalar;

/// Graph handles of a transfer matrix. `enhanced` is `[src, dst]`, or
/// `[batch, src, dst]` when the aggregated rank embedding is batched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferMatrix {
    pub base: NodeId,
    pub enhanced: NodeId,
}

/// `A′ = A_sub + (E_agg + B_src)·B_dstᵀ`. `e_agg` (`[src, d]` or
/// `[batch, src, d]`) may be omitted, which is the same as passing zeros.
pub fn enhanced_transfer<T: Scalar>(
    g: &mut Graph<T>,
    a_sub: NodeId,
    e_agg: Option<NodeId>,
    b_src: NodeId,
    b_dst: NodeId,
) -> Result<TransferMatrix> {
    let (sa, ss, sd) = (g.shape(a_sub).to_vec(), g.shape(b_src).to_vec(), g.shape(b_dst).to_vec());
    let ok = sa.len() == 2 && ss.len() == 2 && sd.len() == 2 && sa[0] == ss[0] && sa[1] == sd[0] && ss[1] == sd[1];
    if !ok {
        return Err(StpsError::shape(
            "enhanced_transfer",
            format!("A {sa:?}, B_src {ss:?}, B_dst {sd:?}"),
        ));
    }
    let src_emb = match e_agg {
        Some(e) => {
            let se = g.shape(e);
            if se.len() < 2 || se[se.len() - 2..] != ss[..] {
                return Err(StpsError::shape(
                    "enhanced_transfer",
                    format!("E {se:?} vs B_src {ss:?}"),
                ));
            }
            g.broadcast_add(e, b_src)?
        }
        None => b_src,
    };
    let dst_t = g.transpose(b_dst)?;
    let outer = g.matmul(src_emb, dst_t)?;
    let enhanced = g.broadcast_add(outer, a_sub)?;
    Ok(TransferMatrix { base: a_sub, enhanced })
}

/// `A_sub + P_sub`: the learnable-matrix variant without embeddings.
pub fn plain_transfer<T: Scalar>(g: &mut Graph<T>, a_sub: NodeId, p_sub: NodeId) -> Result<TransferMatrix> {
    if g.shape(a_sub) != g.shape(p_sub) {
        return Err(StpsError::shape(
            "plain_transfer",
            format!("{:?} vs {:?}", g.shape(a_sub), g.shape(p_sub)),
        ));
    }
    let enhanced = g.add(a_sub, p_sub)?;
    Ok(TransferMatrix { base: a_sub, enhanced })
}

/// `head(A′ᵀ · H′)`: `[.., src, w]` → `[.., dst, head.output]`.
pub fn transfer_apply<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    t: &TransferMatrix,
    h_prime: NodeId,
    head: &ResidualBlock,
    dropout: f64,
) -> Result<NodeId> {
    let w = *g.shape(h_prime).last().unwrap_or(&0);
    if w != head.input {
        return Err(StpsError::shape(
            "transfer_apply",
            format!("head {} expects width {}, representation has {w}", head.prefix, head.input),
        ));
    }
    let at = g.transpose(t.enhanced)?;
    let moved = g.matmul(at, h_prime)?;
    head.forward(g, store, moved, dropout)
}

/// Replaces the transfer matrix with a residual block over the location
/// axis: `[B, src, w]` → `[B, dst, w]`, then the head.
pub fn location_mlp_apply<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    mixer: &ResidualBlock,
    h_prime: NodeId,
    head: &ResidualBlock,
    dropout: f64,
) -> Result<NodeId> {
    let ht = g.transpose(h_prime)?;
    let mixed = mixer.forward(g, store, ht, dropout)?;
    let moved = g.transpose(mixed)?;
    head.forward(g, store, moved, dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, grad_check_store};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn zero_embeddings_give_base_exactly() {
        let a0 = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let a = g.constant(a0.clone());
        let e = g.variable(Tensor::zeros([3, 4]));
        let bs = g.variable(Tensor::zeros([3, 4]));
        let bd = g.variable(Tensor::zeros([2, 4]));
        let tm = enhanced_transfer(&mut g, a, Some(e), bs, bd).unwrap();
        assert_eq!(g.value(tm.enhanced), &a0);
        assert_eq!(tm.base, a);
    }

    #[test]
    fn hand_outer_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 2]));
        let e = g.constant(Tensor::zeros([2, 2]));
        let bs = g.variable(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let bd = g.variable(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let tm = enhanced_transfer(&mut g, a, Some(e), bs, bd).unwrap();
        assert_eq!(g.value(tm.enhanced).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([3, 2]));
        let bs = g.constant(Tensor::zeros([3, 2]));
        let bd = g.constant(Tensor::zeros([3, 2]));
        assert!(enhanced_transfer(&mut g, a, None, bs, bd).is_err());
        let bd = g.constant(Tensor::zeros([2, 2]));
        let e = g.constant(Tensor::zeros([2, 2]));
        assert!(enhanced_transfer(&mut g, a, Some(e), bs, bd).is_err());
    }

    #[test]
    fn enhanced_transfer_gradients() {
        let e0 = t(&[3, 2], &[0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
        let bs0 = t(&[3, 2], &[0.2, 0.9, -0.3, 0.4, 0.6, -0.5]);
        let bd0 = t(&[2, 2], &[0.8, -0.1, 0.25, 0.6]);
        let a0 = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let w0 = t(&[3, 2], &[1.0, -2.0, 0.5, 0.3, -0.7, 1.1]);
        let loss = |g: &mut Graph<f64>, e: NodeId, bs: NodeId, bd: NodeId| -> Result<NodeId> {
            let a = g.constant(a0.clone());
            let tm = enhanced_transfer(g, a, Some(e), bs, bd)?;
            let flat = g.reshape(tm.enhanced, vec![1, 6])?;
            let w = g.constant(w0.clone().reshaped([6, 1])?);
            let y = g.matmul(flat, w)?;
            g.reshape(y, vec![1])
        };
        let (e1, bs1, bd1) = (e0.clone(), bs0.clone(), bd0.clone());
        let err = grad_check(
            |g, x| {
                let bs = g.constant(bs1.clone());
                let bd = g.constant(bd1.clone());
                loss(g, x, bs, bd)
            },
            &e0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "E: {err}");
        let err = grad_check(
            |g, x| {
                let e = g.constant(e1.clone());
                let bd = g.constant(bd1.clone());
                loss(g, e, x, bd)
            },
            &bs0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "B_src: {err}");
        let err = grad_check(
            |g, x| {
                let e = g.constant(e1.clone());
                let bs = g.constant(bs1.clone());
                loss(g, e, bs, x)
            },
            &bd0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "B_dst: {err}");
    }

    #[test]
    fn rank_one_enhancement_has_vanishing_minors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (src, dst) = (rng.gen_range(2..6), rng.gen_range(2..6));
            let r = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect() };
            let a0: Vec<f64> = (0..src * dst).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let mut g = Graph::new();
            let a = g.constant(t(&[src, dst], &a0));
            let e = g.constant(t(&[src, 1], &r(src, &mut rng)));
            let bs = g.constant(t(&[src, 1], &r(src, &mut rng)));
            let bd = g.constant(t(&[dst, 1], &r(dst, &mut rng)));
            let tm = enhanced_transfer(&mut g, a, Some(e), bs, bd).unwrap();
            let v = g.value(tm.enhanced);
            let diff = |i: usize, j: usize| v.at2(i, j) - a0[i * dst + j];
            for i in 0..src {
                for k in i + 1..src {
                    for j in 0..dst {
                        for l in j + 1..dst {
                            let minor = diff(i, j) * diff(k, l) - diff(i, l) * diff(k, j);
                            assert!(minor.abs() < 1e-9, "{minor}");
                        }
                    }
                }
            }
        }
    }

    fn identity_head(store: &mut ParameterStore<f64>, w: usize, out: usize) -> ResidualBlock {
        let head = ResidualBlock::new("head", w, 2, out);
        for name in head.param_names() {
            let shape = match &name[name.len() - 1..] {
                "w" if name.contains("fc1") => vec![w, 2],
                "w" if name.contains("fc2") => vec![2, out],
                "w" => vec![w, out],
                _ if name.contains("fc1") => vec![2],
                _ => vec![out],
            };
            store.insert(name, Tensor::zeros(shape)).unwrap();
        }
        head
    }

    #[test]
    fn identity_chain_returns_representation() {
        let mut store = ParameterStore::new();
        let head = identity_head(&mut store, 3, 3);
        let h0 = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let a = g.constant(Tensor::eye(2));
        let zero = g.constant(Tensor::zeros([2, 1]));
        let tm = enhanced_transfer(&mut g, a, None, zero, zero).unwrap();
        let h = g.constant(h0.clone());
        let out = transfer_apply(&mut g, &store, &tm, h, &head, 0.0).unwrap();
        assert_eq!(g.value(out), &h0);
    }

    #[test]
    fn single_destination_is_weighted_sum() {
        let mut store = ParameterStore::new();
        let head = identity_head(&mut store, 2, 2);
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[0.25, 2.0]));
        let tm = TransferMatrix { base: a, enhanced: a };
        let h = g.constant(t(&[2, 2], &[1.0, -1.0, 3.0, 5.0]));
        let out = transfer_apply(&mut g, &store, &tm, h, &head, 0.0).unwrap();
        assert_eq!(g.value(out).data(), &[0.25 + 6.0, -0.25 + 10.0]);
        let bad = ResidualBlock::new("head", 3, 2, 2);
        assert!(transfer_apply(&mut g, &store, &tm, h, &bad, 0.0).is_err());
    }

    #[test]
    fn head_output_lengths() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head_l = ResidualBlock::new("head_l", 10, 10, 12);
        let head_lp = ResidualBlock::new("head_lp", 10, 10, 96);
        head_l.init(&mut store, &mut rng).unwrap();
        head_lp.init(&mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::full([4, 3], 1.0));
        let tm = TransferMatrix { base: a, enhanced: a };
        let h = g.constant(Tensor::full([2, 4, 10], 0.5));
        let o1 = transfer_apply(&mut g, &store, &tm, h, &head_l, 0.0).unwrap();
        let o2 = transfer_apply(&mut g, &store, &tm, h, &head_lp, 0.0).unwrap();
        assert_eq!(g.shape(o1), &[2, 3, 12]);
        assert_eq!(g.shape(o2), &[2, 3, 96]);
    }

    #[test]
    fn linear_head_superposition() {
        // With fc layers zeroed the head is affine; subtracting the bias makes it linear.
        let mut store = ParameterStore::new();
        let head = identity_head(&mut store, 2, 3);
        *store.value_mut("head.skip.w").unwrap() = t(&[2, 3], &[1.0, 0.5, -2.0, 0.3, 0.0, 1.5]);
        let a0 = t(&[3, 2], &[1.0, 0.2, 0.0, 1.0, -0.5, 0.4]);
        let run = |h: &Tensor<f64>| -> Tensor<f64> {
            let mut g = Graph::new();
            let a = g.constant(a0.clone());
            let tm = TransferMatrix { base: a, enhanced: a };
            let h = g.constant(h.clone());
            let out = transfer_apply(&mut g, &store, &tm, h, &head, 0.0).unwrap();
            g.value(out).clone()
        };
        let x = t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let y = t(&[3, 2], &[0.2, -0.4, 1.5, 1.0, -2.0, 0.1]);
        let sum = t(&[3, 2], &x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * a + b).collect::<Vec<_>>());
        let (fx, fy, fs) = (run(&x), run(&y), run(&sum));
        for k in 0..fs.len() {
            assert!((fs.data()[k] - (2.0 * fx.data()[k] + fy.data()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_transfer_gradcheck() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ResidualBlock::new("head", 2, 2, 3);
        head.init(&mut store, &mut rng).unwrap();
        store.insert("bs", Tensor::from_f64([3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap()).unwrap();
        store.insert("bd", Tensor::from_f64([2, 2], &[0.7, -0.8, 0.9, 0.15]).unwrap()).unwrap();
        store.insert("e", Tensor::from_f64([2, 3, 2], &[0.1, -0.1, 0.2, 0.3, -0.2, 0.05, 0.4, 0.1, -0.3, 0.2, 0.0, 0.6]).unwrap()).unwrap();
        store.insert("h", Tensor::from_f64([2, 3, 2], &[1.0, 0.5, -0.5, 0.2, 0.3, -1.0, 0.8, 0.1, -0.4, 0.9, 0.6, -0.2]).unwrap()).unwrap();
        let checks = grad_check_store(
            &store,
            None,
            |g, s| {
                let a = g.constant(Tensor::from_f64([3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])?);
                let (e, bs, bd, h) = (g.param(s, "e")?, g.param(s, "bs")?, g.param(s, "bd")?, g.param(s, "h")?);
                let tm = enhanced_transfer(g, a, Some(e), bs, bd)?;
                let out = transfer_apply(g, s, &tm, h, &head, 0.0)?;
                let target = Tensor::full([2, 2, 3], 0.05);
                g.mean_abs_error(out, &target)
            },
            1e-6,
        )
        .unwrap();
        for c in checks {
            assert!(c.max_rel_error < 1e-4, "{c:?}");
        }
    }
}
