//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Nodes are only ever
//! appended, so the tape order is already a topological order and `backward`
//! simply walks it in reverse.

use super::tensor::Tensor;
use crate::error::{arg, Result};

/// Clamp applied inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    LogClamped(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    PickRows {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return arg(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

/// `c = a · b` for row-major `a (m, k)` and `b (k, n)`, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover m*k, k*n and m*n elements with the strides above.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (xs[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for j in 0..n {
                    out[at(j)] = xs[at(j)] - max - lse;
                }
            } else {
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Unfolds `(batch, len_in, d_in)` into `(batch * len_out, k * d_in)` windows.
fn im2col(
    x: &[f64],
    batch: usize,
    len_in: usize,
    d_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    len_out: usize,
) -> Vec<f64> {
    let width = k * d_in;
    let mut cols = vec![0.0; batch * len_out * width];
    for b in 0..batch {
        for l in 0..len_out {
            let row = &mut cols[(b * len_out + l) * width..(b * len_out + l + 1) * width];
            for j in 0..k {
                let pos = (l * stride + j) as isize - padding as isize;
                if pos < 0 || pos as usize >= len_in {
                    continue;
                }
                let src = (b * len_in + pos as usize) * d_in;
                row[j * d_in..(j + 1) * d_in].copy_from_slice(&x[src..src + d_in]);
            }
        }
    }
    cols
}

pub(crate) fn conv_out_len(
    len_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || k == 0 || k > len_in + 2 * padding {
        return None;
    }
    Some((len_in + 2 * padding - k) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies `v`'s value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data()[0]
    }

    // ----- linear algebra -------------------------------------------------

    /// `a (..., k) · b (k, n) -> (..., n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return arg(format!("matmul shape mismatch: {sa:?} x {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Batched product `a (B, m, k) · b (B, k, n)`, or `a · bᵀ` with
    /// `b (B, n, k)` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return arg(format!("batch_matmul shape mismatch: {sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return arg(format!("batch_matmul inner mismatch: {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return arg(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    fn trailing_ok(&self, x: Var, b: Var) -> Result<usize> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return arg(format!("cannot broadcast {sb:?} over {sx:?}"));
        }
        Ok(self.value(b).len())
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.trailing_ok(x, b)?;
        let bd = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddTrailing(x, b), rg))
    }

    /// `x * g` where `g`'s shape equals the trailing dimensions of `x`.
    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.trailing_ok(x, g)?;
        let gd = self.value(g).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i % n])
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, g]);
        Ok(self.push(v, Op::MulTrailing(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(v, Op::Square(x), rg)
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(LOG_EPS).ln());
        let rg = self.rg(&[x]);
        self.push(v, Op::LogClamped(x), rg)
    }

    // ----- normalisations -------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let v = softmax_forward(self.value(x), axis, false);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let v = softmax_forward(self.value(x), axis, true);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalises the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(v, Op::LayerNorm { x, rstd }, rg)
    }

    // ----- reductions and reshaping ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&self, x: Var, axis: usize, scale: f64) -> Tensor {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_parts(shape, out)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let v = self.reduce_axis(x, axis, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SumAxis { x, axis }, rg))
    }

    /// Averages out `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let n = self.shape(x)[axis] as f64;
        let v = self.reduce_axis(x, axis, 1.0 / n);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MeanAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return arg("concat of an empty list");
        };
        let base = self.shape(first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != base[i])
            {
                return arg(format!("concat shape mismatch: {s:?} vs {base:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let xv = self.value(x);
                let n = xv.shape()[axis];
                out.extend_from_slice(&xv.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis)?;
        if len == 0 || start + len > s[axis] {
            return arg(format!(
                "slice {start}..{} out of range for {s:?}",
                start + len
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// `out[b] = x[b, idx[b]]` for a `(B, n)` input.
    pub fn pick_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return arg(format!("pick_rows: bad indices for shape {s:?}"));
        }
        let xd = self.value(x).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| xd[b * s[1] + i])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::PickRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ----- composite primitives -------------------------------------------

    /// Temporal convolution of `x (B, L_in, d_in)` with `w (k, d_in, d_out)`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return arg(format!(
                "conv1d shape mismatch: input {sx:?}, kernel {sw:?}"
            ));
        }
        let (batch, len_in, d_in) = (sx[0], sx[1], sx[2]);
        let (k, d_out) = (sw[0], sw[2]);
        let Some(len_out) = conv_out_len(len_in, k, stride, padding) else {
            return arg(format!(
                "conv1d output would be empty: L_in={len_in}, k={k}, stride={stride}, padding={padding}"
            ));
        };
        let cols = im2col(
            self.value(x).data(),
            batch,
            len_in,
            d_in,
            k,
            stride,
            padding,
            len_out,
        );
        let mut out = vec![0.0; batch * len_out * d_out];
        gemm(
            batch * len_out,
            k * d_in,
            d_out,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, len_out, d_out], out),
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `(B, C)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return arg(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return arg(format!("label {bad} out of range for {} classes", s[1]));
        }
        let logp = softmax_forward(self.value(logits), 1, true);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(b, &y)| logp.data()[b * s[1] + y])
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over batched `(B, L, d)` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sk[1] != sv[1] || sq[2] != sk[2] {
            return arg(format!(
                "attention shape mismatch: Q {sq:?}, K {sk:?}, V {sv:?}"
            ));
        }
        let scores = self.batch_matmul(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (sq[2] as f64).sqrt());
        let weights = self.softmax(scores, 2)?;
        self.batch_matmul(weights, v, false)
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `root`, seeding its gradient with 1.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(
                    self.nodes[v.0].value.shape().to_vec(),
                    delta,
                ));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let gd = g.data();
        // Ops are matched by reference and inputs copied out so that
        // `accumulate` can borrow `self` mutably afterwards.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let sb = self.shape(b).to_vec();
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(a).len() / k;
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        false,
                        self.value(b).data(),
                        true,
                        &mut ga,
                        false,
                    );
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(a).data(),
                        true,
                        gd,
                        false,
                        &mut gb,
                        false,
                    );
                    self.accumulate(b, gb);
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a).to_vec();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = gd.len() / (batch * m);
                if self.wants(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    let bd = self.value(b).data();
                    for t in 0..batch {
                        // y = a·b  => ga = g·bᵀ ; y = a·bᵀ => ga = g·b
                        gemm(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &bd[t * k * n..(t + 1) * k * n],
                            !trans_b,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    let ad = self.value(a).data();
                    for t in 0..batch {
                        let ga_slice = &ad[t * m * k..(t + 1) * m * k];
                        let g_slice = &gd[t * m * n..(t + 1) * m * n];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // b is (n, k): gb = gᵀ·a
                            gemm(n, m, k, g_slice, true, ga_slice, false, out, false);
                        } else {
                            // b is (k, n): gb = aᵀ·g
                            gemm(k, m, n, ga_slice, true, g_slice, false, out, false);
                        }
                    }
                    self.accumulate(b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = gd
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = gd
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(b, d);
                }
            }
            &Op::AddTrailing(x, b) => {
                self.accumulate(x, gd.to_vec());
                if self.wants(b) {
                    let n = self.value(b).len();
                    let mut gb = vec![0.0; n];
                    for (j, g) in gd.iter().enumerate() {
                        gb[j % n] += g;
                    }
                    self.accumulate(b, gb);
                }
            }
            &Op::MulTrailing(x, w) => {
                let n = self.value(w).len();
                if self.wants(x) {
                    let wd = self.value(w).data();
                    let d = gd.iter().enumerate().map(|(j, g)| g * wd[j % n]).collect();
                    self.accumulate(x, d);
                }
                if self.wants(w) {
                    let xd = self.value(x).data();
                    let mut gw = vec![0.0; n];
                    for (j, g) in gd.iter().enumerate() {
                        gw[j % n] += g * xd[j];
                    }
                    self.accumulate(w, gw);
                }
            }
            &Op::Scale(x, c) => self.accumulate(x, gd.iter().map(|g| g * c).collect()),
            &Op::AddScalar(x) => self.accumulate(x, gd.to_vec()),
            &Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, d);
            }
            &Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(x, d);
            }
            &Op::Square(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| 2.0 * g * v)
                    .collect();
                self.accumulate(x, d);
            }
            &Op::LogClamped(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| if *v > LOG_EPS { g / v } else { 0.0 })
                    .collect();
                self.accumulate(x, d);
            }
            &Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + c;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, d);
            }
            &Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + c;
                        let total: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = gd[at(j)] - yd[at(j)].exp() * total;
                        }
                    }
                }
                self.accumulate(x, d);
            }
            Op::LayerNorm { x, rstd } => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let n = *self.nodes[i].value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for (r, s) in rstd.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let mean_g = gs.iter().sum::<f64>() / n as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] = s * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
                self.accumulate(x, d);
            }
            &Op::SumAll(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![gd[0]; n]);
            }
            &Op::SumAxis { x, axis } | &Op::MeanAxis { x, axis } => {
                let scale = match self.nodes[i].op {
                    Op::MeanAxis { .. } => 1.0 / self.shape(x)[axis] as f64,
                    _ => 1.0,
                };
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for c in 0..inner {
                            d[(o * n + j) * inner + c] = gd[o * inner + c] * scale;
                        }
                    }
                }
                self.accumulate(x, d);
            }
            &Op::Reshape(x) => self.accumulate(x, gd.to_vec()),
            Op::Concat { xs, axis } => {
                let (xs, axis) = (xs.clone(), *axis);
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for x in xs {
                    let n = self.shape(x)[axis];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.accumulate(x, d);
                    }
                    offset += n;
                }
            }
            &Op::Slice { x, axis, start } => {
                let len = self.nodes[i].value.shape()[axis];
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(x, d);
            }
            Op::PickRows { x, idx } => {
                let x = *x;
                let width = self.shape(x)[1];
                let mut d = vec![0.0; self.value(x).len()];
                for (b, &j) in idx.iter().enumerate() {
                    d[b * width + j] = gd[b];
                }
                self.accumulate(x, d);
            }
            &Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (batch, len_in, d_in) = (sx[0], sx[1], sx[2]);
                let (k, d_out) = (sw[0], sw[2]);
                let len_out = self.nodes[i].value.shape()[1];
                let rows = batch * len_out;
                let width = k * d_in;
                if self.wants(w) {
                    let cols = im2col(
                        self.value(x).data(),
                        batch,
                        len_in,
                        d_in,
                        k,
                        stride,
                        padding,
                        len_out,
                    );
                    let mut gw = vec![0.0; width * d_out];
                    gemm(width, rows, d_out, &cols, true, gd, false, &mut gw, false);
                    self.accumulate(w, gw);
                }
                if self.wants(x) {
                    let mut gcols = vec![0.0; rows * width];
                    gemm(
                        rows,
                        d_out,
                        width,
                        gd,
                        false,
                        self.value(w).data(),
                        true,
                        &mut gcols,
                        false,
                    );
                    let mut gx = vec![0.0; batch * len_in * d_in];
                    for b in 0..batch {
                        for l in 0..len_out {
                            let row =
                                &gcols[(b * len_out + l) * width..(b * len_out + l + 1) * width];
                            for j in 0..k {
                                let pos = (l * stride + j) as isize - padding as isize;
                                if pos < 0 || pos as usize >= len_in {
                                    continue;
                                }
                                let dst = (b * len_in + pos as usize) * d_in;
                                for (t, s) in gx[dst..dst + d_in]
                                    .iter_mut()
                                    .zip(&row[j * d_in..(j + 1) * d_in])
                                {
                                    *t += s;
                                }
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let c = self.shape(logits)[1];
                let mut p = softmax_forward(self.value(logits), 1, false).into_data();
                let scale = gd[0] / labels.len() as f64;
                for (b, &y) in labels.iter().enumerate() {
                    p[b * c + y] -= 1.0;
                }
                p.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(logits, p);
            }
        }
    }
}
