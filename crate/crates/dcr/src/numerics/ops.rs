//! Value-level entry points for the differentiable primitives.
//!
//! Each function runs the same tape operation the models use, on constant
//! inputs, and returns the resulting value.

use super::graph::{Graph, LOG_EPS};
use super::tensor::Tensor;
use crate::error::{arg, Result};

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.softmax(v, axis)?;
    Ok(g.value(y).clone())
}

/// `Σ p·ln(p / max(q, 1e-12))` over all entries, with `0·ln 0 = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return arg(format!(
            "kl_divergence shape mismatch: {:?} vs {:?}",
            p.shape(),
            q.shape()
        ));
    }
    Ok(p.data()
        .iter()
        .zip(q.data())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_EPS).ln()))
        .sum())
}

/// Mean negative log-likelihood of `(batch, C)` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let l = g.cross_entropy(v, labels)?;
    Ok(g.scalar(l))
}

/// Convolves an `(L_in, d_in)` sequence with a `(k, d_in, d_out)` kernel.
pub fn temporal_conv1d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if x.ndim() != 2 {
        return arg(format!("expected (L, d) input, got {:?}", x.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.reshape(&[1, x.shape()[0], x.shape()[1]])?);
    let w = g.constant(kernel.clone());
    let y = g.conv1d(xv, w, stride, padding)?;
    let s = g.shape(y).to_vec();
    g.value(y).reshape(&[s[1], s[2]])
}

/// `softmax(Q Kᵀ / √d_k) V` for unbatched `(L, d)` operands.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return arg("attention operands must be matrices");
    }
    let lift = |t: &Tensor| t.reshape(&[1, t.shape()[0], t.shape()[1]]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(lift(q)?),
        g.constant(lift(k)?),
        g.constant(lift(v)?),
    );
    let y = g.attention(qv, kv, vv)?;
    let s = g.shape(y).to_vec();
    g.value(y).reshape(&[s[1], s[2]])
}

/// Shannon entropy with the same log clamp as the KL term.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * x.max(LOG_EPS).ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::test_support::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_closed_forms() {
        let y = softmax(&Tensor::vector(&[0.0, 0.0]), 0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12 && (y.data()[1] - 0.5).abs() < 1e-12);
        let y = softmax(&Tensor::vector(&[1f64.ln(), 3f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 5], 3.0, &mut rng);
        let y = softmax(&x, 1).unwrap();
        for r in 0..4 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(y.row(r).iter().all(|&v| v > 0.0));
        }
        let oracle = naive_softmax_rows(&x);
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn softmax_saturated_logits_stay_finite() {
        let y = softmax(&Tensor::vector(&[1000.0, 0.0, -1000.0]), 0).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_bad_axis() {
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let p = Tensor::vector(&[0.3, 0.7]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        let kl = kl_divergence(&Tensor::vector(&[1.0, 0.0]), &Tensor::vector(&[0.5, 0.5])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
        let (p, q) = ([0.25, 0.75], [0.75, 0.25]);
        let kl = kl_divergence(&Tensor::vector(&p), &Tensor::vector(&q)).unwrap();
        let mut oracle = 0.0;
        for i in 0..2 {
            oracle += p[i] * (p[i] / q[i]).ln();
        }
        assert!((kl - oracle).abs() < 1e-10);
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(kl_divergence(&Tensor::vector(&[1.0]), &Tensor::vector(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let l = cross_entropy(&Tensor::matrix(1, 2, &[0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&Tensor::matrix(1, 2, &[1000.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!(l.abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 2.0, &mut rng);
        let labels = [0, 3, 1];
        let l = cross_entropy(&x, &labels).unwrap();
        assert!((l - naive_cross_entropy(&x, &labels)).abs() < 1e-10);
        assert!(cross_entropy(&x, &[0, 4, 1]).is_err());
    }

    #[test]
    fn conv_identity_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[1, 3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = temporal_conv1d(&x, &eye, 1, 0).unwrap();
        assert_eq!(y, x);

        let ones = Tensor::full(&[8, 2], 1.0);
        let avg = Tensor::full(&[3, 2, 1], 1.0 / 6.0);
        let y = temporal_conv1d(&ones, &avg, 1, 0).unwrap();
        assert_eq!(y.shape(), &[6, 1]);
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[8, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3, 5], 1.0, &mut rng);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let y = temporal_conv1d(&x, &w, stride, padding).unwrap();
            let oracle = naive_conv1d(&x, &w, stride, padding);
            assert_eq!(y.shape(), oracle.shape());
            assert!(y.max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn conv_empty_output() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(temporal_conv1d(&x, &Tensor::zeros(&[4, 1, 1]), 1, 0).is_err());
    }

    #[test]
    fn attention_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 2], 1.0, &mut rng);
        let y = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert!((y.row(r)[0] - v.data()[0]).abs() < 1e-12);
            assert!((y.row(r)[1] - v.data()[1]).abs() < 1e-12);
        }

        // query orthogonal to every key: uniform weights
        let q = Tensor::matrix(1, 2, &[1.0, 0.0]).unwrap();
        let k = Tensor::matrix(3, 2, &[0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap();
        let v = Tensor::matrix(3, 1, &[1.0, 2.0, 6.0]).unwrap();
        let y = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let y = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(y.max_abs_diff(&naive_attention(&q, &k, &v)) < 1e-9);
        assert!(scaled_dot_attention(&q, &v, &v).is_err());
    }

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!(entropy(&[1.0, 0.0, 0.0, 0.0]).abs() < 1e-9);
    }
}
