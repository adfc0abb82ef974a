//! Scalar-loop reference implementations used only by tests.

use super::Tensor;

pub fn naive_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let mut total = 0.0;
        for j in 0..c {
            total += x.at(&[i, j]).exp();
        }
        for j in 0..c {
            out[i * c + j] = x.at(&[i, j]).exp() / total;
        }
    }
    Tensor::new(&[r, c], out).unwrap()
}

pub fn naive_cross_entropy(x: &Tensor, labels: &[usize]) -> f64 {
    let p = naive_softmax_rows(x);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= p.at(&[i, y]).ln();
    }
    total / labels.len() as f64
}

pub fn naive_conv1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (len_in, d_in) = (x.shape()[0], x.shape()[1]);
    let (k, d_out) = (w.shape()[0], w.shape()[2]);
    let len_out = (len_in + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; len_out * d_out];
    for l in 0..len_out {
        for o in 0..d_out {
            let mut acc = 0.0;
            for j in 0..k {
                let pos = (l * stride + j) as isize - padding as isize;
                if pos < 0 || pos >= len_in as isize {
                    continue;
                }
                for i in 0..d_in {
                    acc += x.at(&[pos as usize, i]) * w.at(&[j, i, o]);
                }
            }
            out[l * d_out + o] = acc;
        }
    }
    Tensor::new(&[len_out, d_out], out).unwrap()
}

pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (lq, dk) = (q.shape()[0], q.shape()[1]);
    let (lk, dv) = (k.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let scores: Vec<f64> = (0..lk)
            .map(|j| {
                (0..dk).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (dk as f64).sqrt()
            })
            .collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..lk {
            let w = scores[j].exp() / total;
            for c in 0..dv {
                out[i * dv + c] += w * v.at(&[j, c]);
            }
        }
    }
    Tensor::new(&[lq, dv], out).unwrap()
}

/// `x (L, a) · w (a, b) + bias (b)`.
pub fn naive_affine(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (l, a) = (x.shape()[0], x.shape()[1]);
    let b = w.shape()[1];
    let mut out = vec![0.0; l * b];
    for i in 0..l {
        for j in 0..b {
            let mut acc = bias.data()[j];
            for c in 0..a {
                acc += x.at(&[i, c]) * w.at(&[c, j]);
            }
            out[i * b + j] = acc;
        }
    }
    Tensor::new(&[l, b], out).unwrap()
}
