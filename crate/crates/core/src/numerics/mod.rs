//! Differentiable-tensor substrate: dense tensors, a reverse-mode tape,
//! and a finite-difference gradient oracle.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_gradient, gradient_rel_error};
pub(crate) use graph::gelu_fwd;
pub use graph::{matmul_nn, matmul_nt, matmul_tn, softmax_into, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::{Dtype, Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let p = g.softmax_rows(x).unwrap();
        assert_close(g.value(p).data()[0], 0.5, 1e-12);
        assert_close(g.value(p).data()[1], 0.5, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::matrix(3, 4, vec![1.0, -2.0, 3.5, 0.0, 100.0, 100.0, -100.0, 0.1, 0.0, 0.0, 0.0, 0.0])
                .unwrap(),
        );
        let p = g.softmax_rows(x).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(p).row(r).iter().sum();
            assert_close(s, 1.0, 1e-6);
        }
    }

    #[test]
    fn cross_entropy_of_confident_correct_prediction_is_zero() {
        let mut g = Graph::<f64>::new();
        // Overwhelming margin stands in for probs = [1, 0].
        let logits = g.constant(Tensor::matrix(1, 2, vec![60.0, 0.0]).unwrap());
        let ce = g.cross_entropy_rows(logits, &[0], &[1.0], 2).unwrap();
        assert_close(g.value(ce).item(), 0.0, 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_confident_logits() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![1e4, 0.0, -1e4]).unwrap());
        let ce = g.cross_entropy_rows(logits, &[1], &[1.0], 3).unwrap();
        let v = g.value(ce).item();
        assert!(v.is_finite());
        assert_close(v, 1e4, 1e-6);
    }

    #[test]
    fn cross_entropy_pad_rows_contribute_nothing() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 2.0, 0.0, 1.0]).unwrap();
        let logits = g.leaf(t);
        let ce = g.cross_entropy_rows(logits, &[1, 3], &[1.0, 1.0], 3).unwrap();
        let grads = g.backward(ce).unwrap();
        let dl = grads.get(logits).unwrap();
        assert!(dl.row(1).iter().all(|&v| v == 0.0), "PAD row must get zero gradient");
        assert!(dl.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
        assert!(g.cross_entropy_rows(logits, &[5], &[1.0], 3).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let gamma = g.constant(Tensor::vector(&[1.0; 4]));
        let beta = g.constant(Tensor::vector(&[0.0; 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for &v in g.value(y).data() {
            assert_close(v, 0.0, 1e-12);
        }
    }

    #[test]
    fn backward_of_square_matches_analytic() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_close(grads.get(x).unwrap().item(), 6.0, 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let y = g.exp(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn stop_gradient_blocks_and_preserves_value() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(4.0));
        let y = g.leaf(Tensor::scalar(7.0));
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx).item(), 4.0);
        let prod = g.mul(sx, y).unwrap();
        let grads = g.backward(prod).unwrap();
        assert!(grads.get(x).is_none(), "stop-gradient input receives no gradient");
        assert_close(grads.get(y).unwrap().item(), 4.0, 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let a = g.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f32) * 0.37 - 1.0).collect()).unwrap());
            let b = g.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f32) * -0.11 + 0.5).collect()).unwrap());
            let c = g.matmul(a, b).unwrap();
            let e = g.gelu(c);
            let s = g.sum(e);
            let grads = g.backward(s).unwrap();
            (grads.get(a).unwrap().data().to_vec(), grads.get(b).unwrap().data().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x = Tensor::scalar(3.0f64);
        let g = finite_diff_gradient(|t| t.item() * t.item(), &x, 1e-4).unwrap();
        assert_close(g.item(), 6.0, 1e-6);
    }

    #[test]
    fn finite_diff_on_linear_sum() {
        let x = Tensor::vector(&[0.3f64, -2.0, 5.0]);
        let g = finite_diff_gradient(|t| t.data().iter().sum(), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert_close(v, 1.0, 1e-9);
        }
    }

    #[test]
    fn finite_diff_reports_non_finite_probe() {
        let x = Tensor::scalar(0.0f64);
        let r = finite_diff_gradient(|t| (1.0 / t.item()).ln(), &x, 1e-4);
        assert!(r.is_err());
    }

    /// Two-layer MLP gradcheck: analytic backward vs central differences.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let w1 = Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect()).unwrap();
        let w2 = Tensor::matrix(4, 2, (0..8).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.2).collect()).unwrap();
        let x0 = Tensor::matrix(2, 3, (0..6).map(|i| (i as f64) * 0.3 - 0.7).collect()).unwrap();

        let loss_fn = |w1t: &Tensor<f64>, w2t: &Tensor<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let x = g.constant(x0.clone());
            let a = g.leaf(w1t.clone());
            let b = g.leaf(w2t.clone());
            let h = g.matmul(x, a).unwrap();
            let h = g.gelu(h);
            let o = g.matmul(h, b).unwrap();
            let p = g.softmax_rows(o).unwrap();
            let lp = g.ln(p);
            let s = g.sum(lp);
            g.value(s).item()
        };

        // Analytic gradients.
        let mut g = Graph::<f64>::new();
        let x = g.constant(x0.clone());
        let a = g.leaf(w1.clone());
        let b = g.leaf(w2.clone());
        let h = g.matmul(x, a).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, b).unwrap();
        let p = g.softmax_rows(o).unwrap();
        let lp = g.ln(p);
        let s = g.sum(lp);
        let grads = g.backward(s).unwrap();

        let num_w1 = finite_diff_gradient(|t| loss_fn(t, &w2), &w1, 1e-5).unwrap();
        let num_w2 = finite_diff_gradient(|t| loss_fn(&w1, t), &w2, 1e-5).unwrap();

        for (an, nu) in grads.get(a).unwrap().data().iter().zip(num_w1.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "w1: {an} vs {nu}");
        }
        for (an, nu) in grads.get(b).unwrap().data().iter().zip(num_w2.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "w2: {an} vs {nu}");
        }
    }

    #[test]
    fn attention_gradcheck_with_prefix() {
        let s = 5;
        let d = 4;
        let mk = |seed: u64| {
            let mut v = Vec::with_capacity(s * d);
            let mut state = seed;
            for _ in 0..s * d {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push(((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0);
            }
            Tensor::matrix(s, d, v).unwrap()
        };
        let (q0, k0, v0) = (mk(1), mk(2), mk(3));
        let eval = |qt: &Tensor<f64>, kt: &Tensor<f64>, vt: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let q = g.leaf(qt.clone());
            let k = g.leaf(kt.clone());
            let v = g.leaf(vt.clone());
            let o = g.attention(q, k, v, 2, 2).unwrap();
            let s = g.sum(o);
            (g.value(s).item(), g, q, k, v, s)
        };
        let (_, g, q, k, v, root) = eval(&q0, &k0, &v0);
        let grads = g.backward(root).unwrap();
        let nq = finite_diff_gradient(|t| eval(t, &k0, &v0).0, &q0, 1e-5).unwrap();
        let nk = finite_diff_gradient(|t| eval(&q0, t, &v0).0, &k0, 1e-5).unwrap();
        let nv = finite_diff_gradient(|t| eval(&q0, &k0, t).0, &v0, 1e-5).unwrap();
        for (an, nu) in grads.get(q).unwrap().data().iter().zip(nq.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "q: {an} vs {nu}");
        }
        for (an, nu) in grads.get(k).unwrap().data().iter().zip(nk.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "k: {an} vs {nu}");
        }
        for (an, nu) in grads.get(v).unwrap().data().iter().zip(nv.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "v: {an} vs {nu}");
        }
    }

    #[test]
    fn layer_norm_and_embedding_gradcheck() {
        let table0 = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64) * 0.13 - 0.9).collect()).unwrap();
        let gamma0 = Tensor::vector(&[1.1f64, 0.9, 1.3]);
        let beta0 = Tensor::vector(&[0.1f64, -0.2, 0.0]);
        let idx = [0usize, 3, 4, 1];
        let eval = |tt: &Tensor<f64>, gt: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let table = g.leaf(tt.clone());
            let gamma = g.leaf(gt.clone());
            let beta = g.leaf(bt.clone());
            let e = g.embed_rows(table, &idx).unwrap();
            let y = g.layer_norm(e, gamma, beta).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let s = g.sum(y2);
            (g.value(s).item(), g, table, gamma, beta, s)
        };
        let (_, g, tv, gv, bv, root) = eval(&table0, &gamma0, &beta0);
        let grads = g.backward(root).unwrap();
        let nt = finite_diff_gradient(|t| eval(t, &gamma0, &beta0).0, &table0, 1e-5).unwrap();
        let ng = finite_diff_gradient(|t| eval(&table0, t, &beta0).0, &gamma0, 1e-5).unwrap();
        let nb = finite_diff_gradient(|t| eval(&table0, &gamma0, t).0, &beta0, 1e-5).unwrap();
        for (an, nu) in grads.get(tv).unwrap().data().iter().zip(nt.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "table: {an} vs {nu}");
        }
        for (an, nu) in grads.get(gv).unwrap().data().iter().zip(ng.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "gamma: {an} vs {nu}");
        }
        for (an, nu) in grads.get(bv).unwrap().data().iter().zip(nb.data()) {
            assert!(gradient_rel_error(*an, *nu) < 1e-4, "beta: {an} vs {nu}");
        }
    }

    #[test]
    fn shape_mismatch_diagnostics_name_the_operation() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }
}
