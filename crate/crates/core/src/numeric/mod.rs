//! Dense tensors and a small reverse-mode differentiation tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_step, GradCheckReport, DEFAULT_FD_STEP};
pub use graph::{BucketTerm, Gradients, Graph, NodeId, L2_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(f: impl Fn(&mut Graph, &[NodeId]) -> crate::Result<NodeId>, params: &[Tensor]) {
        let r = grad_check(f, params, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    /// Weighted sum so every output element is exercised with a distinct
    /// upstream gradient.
    fn probe(g: &mut Graph, x: NodeId, seed: u64) -> crate::Result<NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.shape(x));
        let w = g.constant(w)?;
        let p = g.mul(x, w)?;
        g.sum(p)
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let r = grad_check(
            |g, p| {
                let c = g.matmul(p[0], p[1])?;
                probe(g, c, 9)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_op_matches_fd_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..6 {
            let m = rng.gen_range(1..=32);
            let n = rng.gen_range(2..=32);
            let a = rand_tensor(&mut rng, &[m, n]);
            let b = rand_tensor(&mut rng, &[m, n]);
            let row = rand_tensor(&mut rng, &[n]);
            let s = rand_tensor(&mut rng, &[1]);
            let seed = trial as u64;
            check(|g, p| { let y = g.add(p[0], p[1])?; probe(g, y, seed) }, &[a.clone(), b.clone()]);
            check(|g, p| { let y = g.sub(p[0], p[1])?; probe(g, y, seed) }, &[a.clone(), b.clone()]);
            check(|g, p| { let y = g.mul(p[0], p[1])?; probe(g, y, seed) }, &[a.clone(), b.clone()]);
            check(|g, p| { let y = g.add_row(p[0], p[1])?; probe(g, y, seed) }, &[a.clone(), row.clone()]);
            check(|g, p| { let y = g.mul_row(p[0], p[1])?; probe(g, y, seed) }, &[a.clone(), row.clone()]);
            check(|g, p| { let y = g.scale(p[0], -2.5)?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.scale_by(p[0], p[1])?; probe(g, y, seed) }, &[a.clone(), s.clone()]);
            check(|g, p| { let y = g.exp(p[0])?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.gelu(p[0])?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.mean(p[0])?; g.scale(y, 3.0) }, &[a.clone()]);
            check(|g, p| { let y = g.mean_rows(p[0])?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.layer_norm(p[0])?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.softmax(p[0])?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.concat_rows(&[p[0], p[1]])?; probe(g, y, seed) }, &[a.clone(), b.clone()]);
            check(|g, p| { let y = g.concat_cols(&[p[0], p[1]])?; probe(g, y, seed) }, &[a.clone(), b.clone()]);
            check(|g, p| { let y = g.slice_rows(p[0], 0, m)?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.slice_cols(p[0], 1, n - 1)?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.transpose(p[0])?; probe(g, y, seed) }, &[a.clone()]);
            let idx: Vec<usize> = (0..m + 2).map(|i| (i * 7) % m).collect();
            check(|g, p| { let y = g.select_rows(p[0], &idx)?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.reshape(p[0], &[m * n])?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.l2_normalize(p[0], L2_EPS)?; probe(g, y, seed) }, &[a.clone()]);
            check(|g, p| { let y = g.l2_normalize_rows(p[0], L2_EPS)?; probe(g, y, seed) }, &[a.clone()]);
            let targets: Vec<usize> = (0..m).map(|i| i % n).collect();
            check(|g, p| g.cross_entropy(p[0], &targets), &[a.clone()]);
            let plan: Vec<BucketTerm> = (0..m)
                .map(|i| BucketTerm::Row { row: i, bucket: i % 3 })
                .chain(std::iter::once(BucketTerm::Const { bucket: 1, values: vec![0.5; n] }))
                .collect();
            check(|g, p| { let y = g.bucket_sum(p[0], 3, &plan)?; probe(g, y, seed) }, &[a.clone()]);
        }
    }

    #[test]
    fn relu_grad_away_from_kink() {
        let x = Tensor::vector(vec![0.5, -0.7, 1.3, -0.2]);
        check(|g, p| { let y = g.relu(p[0])?; probe(g, y, 4) }, &[x]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let y = g.l2_normalize(x, L2_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);

        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.l2_normalize(z, L2_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = g.constant(rand_tensor(&mut rng, &[16])).unwrap();
        let y = g.l2_normalize(r, L2_EPS).unwrap();
        assert!((g.value(y).norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |logits: Vec<f64>, t: usize| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(logits)).unwrap();
            let l = g.cross_entropy(x, &[t]).unwrap();
            g.value(l).item()
        };
        assert!((ce(vec![0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        let big = ce(vec![1000.0, 0.0], 0);
        assert!(big.is_finite() && big.abs() < 1e-12);
        // -ln(e^3 / (e + e^2 + e^3))
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((ce(vec![1.0, 2.0, 3.0], 2) - expected).abs() < 1e-12);
        assert!((expected - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::Index { index: 2, len: 2 })));
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(x.clone()).unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
        let r = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            },
            &[x.clone()],
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");

        // constant function
        let mut g = Graph::new();
        let p = g.param(x.clone()).unwrap();
        let z = g.scale(p, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_check_flags_non_finite_gradient() {
        let x = Tensor::vector(vec![700.0]);
        let err = grad_check(
            |g, p| {
                g.set_check_finite(false);
                let e = g.exp(p[0])?;
                let e2 = g.mul(e, e)?; // overflows to inf
                g.sum(e2)
            },
            &[x],
            1e-4,
        );
        assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
    }

    #[test]
    fn forward_replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let a = g.param(rand_tensor(&mut rng, &[5, 7])).unwrap();
            let b = g.param(rand_tensor(&mut rng, &[7, 3])).unwrap();
            let c = g.matmul(a, b).unwrap();
            let c = g.gelu(c).unwrap();
            let c = g.softmax(c).unwrap();
            let l = g.cross_entropy(c, &[0, 1, 2, 0, 1]).unwrap();
            let gr = g.backward(l).unwrap();
            (g.value(l).clone(), gr.get(a).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shuffled_independent_subgraphs_same_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let y = rand_tensor(&mut rng, &[4, 4]);
        let branch_x = |g: &mut Graph, p: NodeId| {
            let t = g.layer_norm(p).unwrap();
            let t = g.gelu(t).unwrap();
            g.sum(t).unwrap()
        };
        let branch_y = |g: &mut Graph, p: NodeId| {
            let t = g.softmax(p).unwrap();
            let t = g.mul(t, t).unwrap();
            g.mean(t).unwrap()
        };
        let mut g1 = Graph::new();
        let px = g1.param(x.clone()).unwrap();
        let py = g1.param(y.clone()).unwrap();
        let sx = branch_x(&mut g1, px);
        let sy = branch_y(&mut g1, py);
        let l1 = g1.add(sx, sy).unwrap();
        let gr1 = g1.backward(l1).unwrap();

        let mut g2 = Graph::new();
        let py2 = g2.param(y).unwrap();
        let sy2 = branch_y(&mut g2, py2);
        let px2 = g2.param(x).unwrap();
        let sx2 = branch_x(&mut g2, px2);
        let l2 = g2.add(sx2, sy2).unwrap();
        let gr2 = g2.backward(l2).unwrap();

        assert_eq!(gr1.get(px), gr2.get(px2));
        assert_eq!(gr1.get(py), gr2.get(py2));
        assert_eq!(g1.value(l1), g2.value(l2));
    }

    #[test]
    fn check_mode_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
        g.set_check_finite(false);
        assert!(g.exp(x).is_ok());
    }

    #[test]
    fn constants_have_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let p = g.param(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let s = g.mul(c, p).unwrap();
        let s = g.sum(s).unwrap();
        let gr = g.backward(s).unwrap();
        assert!(gr.get(c).is_none());
        assert_eq!(gr.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
