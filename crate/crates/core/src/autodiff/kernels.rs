//! Forward and backward kernels for every op kind.
//!
//! Kernels are shared by the recording [`Tape`](super::Tape) and the eager
//! [`Eager`](super::Eager) graph so both paths compute bit-identical values.

use std::f64::consts::PI;

use super::{AutodiffError, Tensor};

/// Operation recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    Affine,
    /// `a · b` for rank-2 operands.
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Sigmoid,
    Exp,
    Square,
    Abs,
    /// Sum of all entries, `[1, 1]` output.
    Sum,
    /// Mean of all entries, `[1, 1]` output.
    Mean,
    /// Population variance along an axis of a rank-2 tensor.
    Variance { axis: usize },
    Concat { axis: usize },
    Scale(f64),
    Slice { axis: usize, start: usize, len: usize },
    /// Sine/cosine features with frequencies `2^k·π`, `k = 0..bands`.
    ///
    /// For an input row `p` of width `d` the output row has width `2·bands·d`
    /// laid out band by band: `[sin(2^k π p_0..p_d), cos(2^k π p_0..p_d)]`.
    Fourier { bands: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Affine => "affine",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Sin => "sin",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Variance { .. } => "variance",
            Op::Concat { .. } => "concat",
            Op::Scale(_) => "scale",
            Op::Slice { .. } => "slice",
            Op::Fourier { .. } => "fourier",
        }
    }
}

fn shape_err(op: &Op, inputs: &[&Tensor], why: &str) -> AutodiffError {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    AutodiffError::Shape { op: op.name(), detail: format!("{} (input shapes {:?})", why, shapes) }
}

fn require_rank2(op: &Op, inputs: &[&Tensor]) -> Result<(), AutodiffError> {
    if inputs.iter().all(|t| t.rank() == 2) {
        Ok(())
    } else {
        Err(shape_err(op, inputs, "expected rank-2 operands"))
    }
}

/// General `c = alpha·a·b + beta·c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c.iter_mut().take(m * n).for_each(|v| *v *= beta);
        return;
    }
    let a_extent = (m - 1) as isize * a_strides.0 + (k - 1) as isize * a_strides.1;
    let b_extent = (k - 1) as isize * b_strides.0 + (n - 1) as isize * b_strides.1;
    assert!((a_extent as usize) < a.len() && (b_extent as usize) < b.len());
    // SAFETY: the extents above keep every strided access inside `a` and `b`,
    // and `c` holds at least m·n contiguous values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How one binary operand is indexed when broadcast against the output.
#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
}

impl Bcast {
    #[inline]
    fn index(self, r: usize, c: usize) -> usize {
        let rr = if self.rows == 1 { 0 } else { r };
        let cc = if self.cols == 1 { 0 } else { c };
        rr * self.cols + cc
    }
}

fn broadcast_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<(usize, usize), AutodiffError> {
    require_rank2(op, &[a, b])?;
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(op, &[a, b], "operands do not broadcast")),
    }
}

fn binary_forward(op: &Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
    let (r, c) = broadcast_shape(op, a, b)?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::matrix(r, c, data));
    }
    let (ab, bb) = (Bcast { rows: a.rows(), cols: a.cols() }, Bcast { rows: b.rows(), cols: b.cols() });
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(a.data()[ab.index(i, j)], b.data()[bb.index(i, j)]));
        }
    }
    Ok(Tensor::matrix(r, c, out))
}

/// Sums a full-size gradient back down to a broadcast operand's shape.
fn reduce_to(grad: &[f64], out_rows: usize, out_cols: usize, target: &Tensor, scale: impl Fn(usize, usize) -> f64) -> Tensor {
    let bc = Bcast { rows: target.rows(), cols: target.cols() };
    let mut acc = Tensor::zeros(target.shape());
    let data = acc.data_mut();
    for i in 0..out_rows {
        for j in 0..out_cols {
            data[bc.index(i, j)] += grad[i * out_cols + j] * scale(i, j);
        }
    }
    acc
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let arity = match op {
        Op::Affine => 3,
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
        Op::Concat { .. } => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(shape_err(op, inputs, &format!("expected {} inputs", arity)));
    }
    match op {
        Op::Affine => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            require_rank2(op, inputs)?;
            let (n, din) = x.dims2();
            let (win, dout) = w.dims2();
            if din != win || b.dims2() != (1, dout) {
                return Err(shape_err(op, inputs, "x: [n, in], w: [in, out], b: [1, out] required"));
            }
            let mut out = Vec::with_capacity(n * dout);
            for _ in 0..n {
                out.extend_from_slice(b.data());
            }
            gemm(n, din, dout, x.data(), (din as isize, 1), w.data(), (dout as isize, 1), &mut out, 1.0);
            Ok(Tensor::matrix(n, dout, out))
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            require_rank2(op, inputs)?;
            let (m, k) = a.dims2();
            let (k2, n) = b.dims2();
            if k != k2 {
                return Err(shape_err(op, inputs, "inner dimensions differ"));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out, 0.0);
            Ok(Tensor::matrix(m, n, out))
        }
        Op::Add => binary_forward(op, inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => binary_forward(op, inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => binary_forward(op, inputs[0], inputs[1], |a, b| a * b),
        Op::Div => binary_forward(op, inputs[0], inputs[1], |a, b| a / b),
        Op::Sin => Ok(unary(inputs[0], f64::sin)),
        Op::Sigmoid => Ok(unary(inputs[0], sigmoid)),
        Op::Exp => Ok(unary(inputs[0], f64::exp)),
        Op::Square => Ok(unary(inputs[0], |v| v * v)),
        Op::Abs => Ok(unary(inputs[0], f64::abs)),
        Op::Scale(s) => Ok(unary(inputs[0], |v| v * s)),
        Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::Mean => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(shape_err(op, inputs, "mean of an empty tensor"));
            }
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        Op::Variance { axis } => {
            let x = inputs[0];
            require_rank2(op, inputs)?;
            let (r, c) = x.dims2();
            match axis {
                0 if r > 0 => {
                    let mut out = vec![0.0; c];
                    for (j, o) in out.iter_mut().enumerate() {
                        let mean = (0..r).map(|i| x.get2(i, j)).sum::<f64>() / r as f64;
                        *o = (0..r).map(|i| (x.get2(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
                    }
                    Ok(Tensor::matrix(1, c, out))
                }
                1 if c > 0 => {
                    let out = (0..r)
                        .map(|i| {
                            let row = x.row(i);
                            let mean = row.iter().sum::<f64>() / c as f64;
                            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64
                        })
                        .collect();
                    Ok(Tensor::matrix(r, 1, out))
                }
                _ => Err(shape_err(op, inputs, &format!("bad axis {} or empty extent", axis))),
            }
        }
        Op::Concat { axis } => {
            require_rank2(op, inputs)?;
            match axis {
                0 => {
                    let c = inputs[0].cols();
                    if inputs.iter().any(|t| t.cols() != c) {
                        return Err(shape_err(op, inputs, "column counts differ"));
                    }
                    let r = inputs.iter().map(|t| t.rows()).sum();
                    let mut out = Vec::with_capacity(r * c);
                    for t in inputs {
                        out.extend_from_slice(t.data());
                    }
                    Ok(Tensor::matrix(r, c, out))
                }
                1 => {
                    let r = inputs[0].rows();
                    if inputs.iter().any(|t| t.rows() != r) {
                        return Err(shape_err(op, inputs, "row counts differ"));
                    }
                    let c: usize = inputs.iter().map(|t| t.cols()).sum();
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for t in inputs {
                            out.extend_from_slice(t.row(i));
                        }
                    }
                    Ok(Tensor::matrix(r, c, out))
                }
                _ => Err(shape_err(op, inputs, &format!("bad axis {}", axis))),
            }
        }
        Op::Slice { axis, start, len } => {
            let x = inputs[0];
            require_rank2(op, inputs)?;
            let (r, c) = x.dims2();
            match axis {
                0 if start + len <= r => Ok(Tensor::matrix(*len, c, x.data()[start * c..(start + len) * c].to_vec())),
                1 if start + len <= c => {
                    let mut out = Vec::with_capacity(r * len);
                    for i in 0..r {
                        out.extend_from_slice(&x.row(i)[*start..start + len]);
                    }
                    Ok(Tensor::matrix(r, *len, out))
                }
                _ => Err(shape_err(op, inputs, &format!("slice axis {} [{}, {}) out of range", axis, start, start + len))),
            }
        }
        Op::Fourier { bands } => {
            let x = inputs[0];
            require_rank2(op, inputs)?;
            let (r, d) = x.dims2();
            let width = 2 * bands * d;
            let mut out = vec![0.0; r * width];
            for i in 0..r {
                let row = x.row(i);
                let dst = &mut out[i * width..(i + 1) * width];
                for k in 0..*bands {
                    let freq = (1u64 << k) as f64 * PI;
                    for (j, &p) in row.iter().enumerate() {
                        let (s, c) = (freq * p).sin_cos();
                        dst[k * 2 * d + j] = s;
                        dst[k * 2 * d + d + j] = c;
                    }
                }
            }
            Ok(Tensor::matrix(r, width, out))
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Vector-Jacobian products for each input. Entries are `None` where
/// `needs[i]` is false.
pub fn backward(op: &Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let g = grad.data();
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Affine => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, din) = x.dims2();
            let dout = w.cols();
            let dx = want(0).then(|| {
                let mut out = vec![0.0; n * din];
                gemm(n, dout, din, g, (dout as isize, 1), w.data(), (1, dout as isize), &mut out, 0.0);
                Tensor::matrix(n, din, out)
            });
            let dw = want(1).then(|| {
                let mut out = vec![0.0; din * dout];
                gemm(din, n, dout, x.data(), (1, din as isize), g, (dout as isize, 1), &mut out, 0.0);
                Tensor::matrix(din, dout, out)
            });
            let db = want(2).then(|| {
                let mut out = vec![0.0; dout];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(&g[i * dout..(i + 1) * dout]) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, dout, out)
            });
            vec![dx, dw, db]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2();
            let n = b.cols();
            let da = want(0).then(|| {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g, (n as isize, 1), b.data(), (1, n as isize), &mut out, 0.0);
                Tensor::matrix(m, k, out)
            });
            let db = want(1).then(|| {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k as isize), g, (n as isize, 1), &mut out, 0.0);
                Tensor::matrix(k, n, out)
            });
            vec![da, db]
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let (r, c) = output.dims2();
            let (ab, bb) = (Bcast { rows: a.rows(), cols: a.cols() }, Bcast { rows: b.rows(), cols: b.cols() });
            let av = |i: usize, j: usize| a.data()[ab.index(i, j)];
            let bv = |i: usize, j: usize| b.data()[bb.index(i, j)];
            let da = want(0).then(|| match op {
                Op::Add | Op::Sub => reduce_to(g, r, c, a, |_, _| 1.0),
                Op::Mul => reduce_to(g, r, c, a, |i, j| bv(i, j)),
                _ => reduce_to(g, r, c, a, |i, j| 1.0 / bv(i, j)),
            });
            let db = want(1).then(|| match op {
                Op::Add => reduce_to(g, r, c, b, |_, _| 1.0),
                Op::Sub => reduce_to(g, r, c, b, |_, _| -1.0),
                Op::Mul => reduce_to(g, r, c, b, |i, j| av(i, j)),
                _ => reduce_to(g, r, c, b, |i, j| {
                    let d = bv(i, j);
                    -av(i, j) / (d * d)
                }),
            });
            vec![da, db]
        }
        Op::Sin => vec![want(0).then(|| zip_map(inputs[0], grad, |x, g| x.cos() * g))],
        Op::Sigmoid => vec![want(0).then(|| zip_map(output, grad, |y, g| y * (1.0 - y) * g))],
        Op::Exp => vec![want(0).then(|| zip_map(output, grad, |y, g| y * g))],
        Op::Square => vec![want(0).then(|| zip_map(inputs[0], grad, |x, g| 2.0 * x * g))],
        Op::Abs => vec![want(0).then(|| {
            zip_map(inputs[0], grad, |x, g| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        })],
        Op::Scale(s) => vec![want(0).then(|| grad.map(|g| g * s))],
        Op::Sum => vec![want(0).then(|| Tensor::filled(inputs[0].shape(), g[0]))],
        Op::Mean => vec![want(0).then(|| Tensor::filled(inputs[0].shape(), g[0] / inputs[0].len() as f64))],
        Op::Variance { axis } => vec![want(0).then(|| {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let mut out = Tensor::zeros(x.shape());
            let d = out.data_mut();
            if *axis == 0 {
                for j in 0..c {
                    let mean = (0..r).map(|i| x.get2(i, j)).sum::<f64>() / r as f64;
                    for i in 0..r {
                        d[i * c + j] = 2.0 * (x.get2(i, j) - mean) / r as f64 * g[j];
                    }
                }
            } else {
                for i in 0..r {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] = 2.0 * (row[j] - mean) / c as f64 * g[i];
                    }
                }
            }
            out
        })],
        Op::Concat { axis } => {
            let mut grads = Vec::with_capacity(inputs.len());
            let (_, oc) = output.dims2();
            let mut offset = 0;
            for (idx, t) in inputs.iter().enumerate() {
                let (r, c) = t.dims2();
                if want(idx) {
                    let data = if *axis == 0 {
                        g[offset * oc..(offset + r) * oc].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * oc + offset..i * oc + offset + c]);
                        }
                        d
                    };
                    grads.push(Some(Tensor::matrix(r, c, data)));
                } else {
                    grads.push(None);
                }
                offset += if *axis == 0 { r } else { c };
            }
            grads
        }
        Op::Slice { axis, start, len } => vec![want(0).then(|| {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let mut out = Tensor::zeros(x.shape());
            let d = out.data_mut();
            if *axis == 0 {
                d[start * c..(start + len) * c].copy_from_slice(g);
            } else {
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
            }
            out
        })],
        Op::Fourier { bands } => vec![want(0).then(|| {
            let x = inputs[0];
            let (r, d) = x.dims2();
            let width = 2 * bands * d;
            let mut out = vec![0.0; r * d];
            for i in 0..r {
                let y = &output.data()[i * width..(i + 1) * width];
                let gy = &g[i * width..(i + 1) * width];
                for k in 0..*bands {
                    let freq = (1u64 << k) as f64 * PI;
                    for j in 0..d {
                        let (si, ci) = (k * 2 * d + j, k * 2 * d + d + j);
                        out[i * d + j] += freq * (y[ci] * gy[si] - y[si] * gy[ci]);
                    }
                }
            }
            Tensor::matrix(r, d, out)
        })],
    }
}

fn zip_map(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
