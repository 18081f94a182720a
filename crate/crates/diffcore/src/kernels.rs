//! Forward and reverse kernels for every primitive.

use crate::error::{Result, TapeError};
use crate::tape::{Op, Var};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

fn mismatch(node: usize, op: &Op, detail: String) -> TapeError {
    TapeError::ShapeMismatch {
        node,
        op: op.name(),
        detail,
    }
}

enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if b.len() == 1 {
        Ok(Pairing::RightScalar)
    } else if a.len() == 1 {
        Ok(Pairing::LeftScalar)
    } else {
        Err(mismatch(node, op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn binary(node: usize, op: &Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Ok(match pairing(node, op, a, b)? {
        Pairing::Same => Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Pairing::RightScalar => {
            let y = b.data()[0];
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
        }
        Pairing::LeftScalar => {
            let x = a.data()[0];
            Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
        }
    })
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(node: usize, op: &Op, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.shape().len() {
        return Err(mismatch(
            node,
            op,
            format!("axis {} out of range for shape {:?}", axis, t.shape()),
        ));
    }
    Ok(())
}

fn check_matrix(node: usize, op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(mismatch(node, op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn cholesky(node: usize, a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let ad = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = ad[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(TapeError::NotPositiveDefinite { node });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = ad[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], l))
}

/// Solves `L X = B` in place over the columns of `b` (n × m, row-major).
fn forward_subst(l: &[f64], b: &mut [f64], n: usize, m: usize) {
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            if lik == 0.0 {
                continue;
            }
            let (head, tail) = b.split_at_mut(i * m);
            let xk = &head[k * m..(k + 1) * m];
            for (bi, &x) in tail[..m].iter_mut().zip(xk) {
                *bi -= lik * x;
            }
        }
        let d = l[i * n + i];
        for v in &mut b[i * m..(i + 1) * m] {
            *v /= d;
        }
    }
}

/// Solves `Lᵀ X = B` in place.
fn backward_subst_t(l: &[f64], b: &mut [f64], n: usize, m: usize) {
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            if lki == 0.0 {
                continue;
            }
            let (head, tail) = b.split_at_mut(k * m);
            let xk = &tail[..m];
            for (bi, &x) in head[i * m..(i + 1) * m].iter_mut().zip(xk) {
                *bi -= lki * x;
            }
        }
        let d = l[i * n + i];
        for v in &mut b[i * m..(i + 1) * m] {
            *v /= d;
        }
    }
}

fn solve(l: &Tensor, b: &Tensor, transpose: bool) -> Tensor {
    let n = l.rows();
    let m = b.len() / n;
    let mut x = b.data().to_vec();
    if transpose {
        backward_subst_t(l.data(), &mut x, n, m);
    } else {
        forward_subst(l.data(), &mut x, n, m);
    }
    Tensor::from_parts(b.shape().to_vec(), x)
}

fn tril(t: &mut Tensor) {
    let n = t.rows();
    let d = t.data_mut();
    for i in 0..n {
        for j in (i + 1)..n {
            d[i * n + j] = 0.0;
        }
    }
}

pub(crate) fn forward(node: usize, op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let v = |x: &Var| &values[x.index()];
    Ok(match op {
        Op::Input(_) | Op::Const(_) => unreachable!("leaf nodes are bound by the tape"),
        Op::Add(a, b) => binary(node, op, v(a), v(b), |x, y| x + y)?,
        Op::Sub(a, b) => binary(node, op, v(a), v(b), |x, y| x - y)?,
        Op::Mul(a, b) => binary(node, op, v(a), v(b), |x, y| x * y)?,
        Op::Max(a, b) => binary(node, op, v(a), v(b), f64::max)?,
        Op::Scale(a, k) => v(a).map(|x| x * k),
        Op::Shift(a, k) => v(a).map(|x| x + k),
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let (n, k) = check_matrix(node, op, ta)?;
            let (k2, m) = check_matrix(node, op, tb)?;
            if k != k2 {
                return Err(mismatch(node, op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
            }
            let mut out = vec![0.0; n * m];
            matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
            Tensor::from_parts(vec![n, m], out)
        }
        Op::Transpose(a) => {
            check_matrix(node, op, v(a))?;
            v(a).transpose()
        }
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::Clamp { x, lo, hi } => v(x).map(|t| t.clamp(*lo, *hi)),
        Op::Softmax { x, axis } => {
            let t = v(x);
            check_axis(node, op, t, *axis)?;
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let src = t.data();
            let mut out = vec![0.0; t.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let mx = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..n {
                        let e = (src[idx(k)] - mx).exp();
                        out[idx(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        out[idx(k)] /= z;
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        }
        Op::Concat { parts, axis } => {
            let first = v(&parts[0]);
            check_axis(node, op, first, *axis)?;
            let mut shape = first.shape().to_vec();
            let mut total = 0;
            for p in parts {
                let s = v(p).shape();
                let mut a = s.to_vec();
                let mut b = first.shape().to_vec();
                if a.len() != b.len() {
                    return Err(mismatch(node, op, format!("{:?} vs {:?}", first.shape(), s)));
                }
                a[*axis] = 0;
                b[*axis] = 0;
                if a != b {
                    return Err(mismatch(node, op, format!("{:?} vs {:?}", first.shape(), s)));
                }
                total += s[*axis];
            }
            shape[*axis] = total;
            let (outer, _, inner) = axis_split(&shape, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = v(p);
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, out)
        }
        Op::Slice { x, axis, start, len } => {
            let t = v(x);
            check_axis(node, op, t, *axis)?;
            if start + len > t.shape()[*axis] {
                return Err(mismatch(
                    node,
                    op,
                    format!("slice {}..{} of axis extent {}", start, start + len, t.shape()[*axis]),
                ));
            }
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let mut shape = t.shape().to_vec();
            shape[*axis] = *len;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            Tensor::from_parts(shape, out)
        }
        Op::GatherRows { table, indices } => {
            let t = v(table);
            let (rows, cols) = check_matrix(node, op, t)?;
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(TapeError::IndexOutOfRange { node, index: i, rows });
                }
                out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
            }
            Tensor::from_parts(vec![indices.len(), cols], out)
        }
        Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
            let t = v(x);
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let s = t.sum();
                    let n = t.len().max(1) as f64;
                    Tensor::scalar(if mean { s / n } else { s })
                }
                Some(ax) => {
                    check_axis(node, op, t, *ax)?;
                    let (outer, n, inner) = axis_split(t.shape(), *ax);
                    let mut out = vec![0.0; outer * inner];
                    let src = t.data();
                    for o in 0..outer {
                        for k in 0..n {
                            let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (acc, &val) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                                *acc += val;
                            }
                        }
                    }
                    if mean && n > 0 {
                        for val in &mut out {
                            *val /= n as f64;
                        }
                    }
                    let mut shape = t.shape().to_vec();
                    shape[*ax] = 1;
                    Tensor::from_parts(shape, out)
                }
            }
        }
        Op::Cholesky(a) => {
            let t = v(a);
            let (r, c) = check_matrix(node, op, t)?;
            if r != c {
                return Err(mismatch(node, op, format!("not square: {:?}", t.shape())));
            }
            cholesky(node, t)?
        }
        Op::SolveLower { l, b, transpose } => {
            let (tl, tb) = (v(l), v(b));
            let (r, c) = check_matrix(node, op, tl)?;
            if r != c || tb.shape().is_empty() || tb.shape()[0] != r {
                return Err(mismatch(node, op, format!("{:?} vs {:?}", tl.shape(), tb.shape())));
            }
            solve(tl, tb, *transpose)
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reduces an elementwise gradient onto an operand that may have been broadcast.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        let mut t = Tensor::zeros(target.shape());
        t.data_mut()[0] = g.sum();
        t
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Elementwise product of `g` with an operand, handling scalar broadcast of that operand.
fn times_operand(g: &Tensor, operand: &Tensor) -> Tensor {
    if operand.len() == 1 && g.len() != 1 {
        let k = operand.data()[0];
        g.map(|x| x * k)
    } else if g.shape() == operand.shape() {
        zip_map(g, operand, |x, y| x * y)
    } else {
        // g is scalar while the operand is not: cannot happen for elementwise results.
        let k = g.data()[0];
        operand.map(|y| y * k)
    }
}

pub(crate) fn backward(op: &Op, values: &[Tensor], out: &Tensor, g: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
    let v = |x: &Var| &values[x.index()];
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    match op {
        Op::Input(_) | Op::Const(_) => Vec::new(),
        Op::Add(a, b) => vec![
            want(0).then(|| reduce_to(g.clone(), v(a))),
            want(1).then(|| reduce_to(g.clone(), v(b))),
        ],
        Op::Sub(a, b) => vec![
            want(0).then(|| reduce_to(g.clone(), v(a))),
            want(1).then(|| reduce_to(g.map(|x| -x), v(b))),
        ],
        Op::Mul(a, b) => vec![
            want(0).then(|| reduce_to(times_operand(g, v(b)), v(a))),
            want(1).then(|| reduce_to(times_operand(g, v(a)), v(b))),
        ],
        Op::Max(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let pick = |take_a: bool| {
                let data: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let x = if ta.len() == 1 { ta.data()[0] } else { ta.data()[i] };
                        let y = if tb.len() == 1 { tb.data()[0] } else { tb.data()[i] };
                        if (x >= y) == take_a {
                            g.data()[i]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            };
            vec![
                want(0).then(|| reduce_to(pick(true), ta)),
                want(1).then(|| reduce_to(pick(false), tb)),
            ]
        }
        Op::Scale(_, k) => vec![Some(g.map(|x| x * k))],
        Op::Shift(..) => vec![Some(g.clone())],
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
            let ga = want(0).then(|| {
                let mut d = vec![0.0; n * k];
                matmul_nt_into(g.data(), tb.data(), &mut d, n, k, m);
                Tensor::from_parts(vec![n, k], d)
            });
            let gb = want(1).then(|| {
                let mut d = vec![0.0; k * m];
                matmul_tn_into(ta.data(), g.data(), &mut d, n, k, m);
                Tensor::from_parts(vec![k, m], d)
            });
            vec![ga, gb]
        }
        Op::Transpose(_) => vec![Some(g.transpose())],
        Op::Sigmoid(_) => vec![Some(zip_map(g, out, |gv, y| gv * y * (1.0 - y)))],
        Op::Tanh(_) => vec![Some(zip_map(g, out, |gv, y| gv * (1.0 - y * y)))],
        Op::Exp(_) => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Op::Log(a) => vec![Some(zip_map(g, v(a), |gv, x| gv / x))],
        Op::Sqrt(_) => vec![Some(zip_map(g, out, |gv, y| 0.5 * gv / y))],
        Op::Clamp { x, lo, hi } => vec![Some(zip_map(
            g,
            v(x),
            |gv, t| {
                if t > *lo && t < *hi {
                    gv
                } else {
                    0.0
                }
            },
        ))],
        Op::Softmax { axis, .. } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                    for k in 0..n {
                        dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for (pi, p) in parts.iter().enumerate() {
                let t = v(p);
                let ext = t.shape()[*axis];
                if want(pi) {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + ext * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
                } else {
                    grads.push(None);
                }
                offset += ext;
            }
            grads
        }
        Op::Slice { x, axis, start, len } => {
            let t = v(x);
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let mut d = vec![0.0; t.len()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(t.shape().to_vec(), d))]
        }
        Op::GatherRows { table, indices } => {
            let t = v(table);
            let cols = t.cols();
            let mut d = vec![0.0; t.len()];
            for (r, &i) in indices.iter().enumerate() {
                let src = &g.data()[r * cols..(r + 1) * cols];
                for (acc, &s) in d[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                    *acc += s;
                }
            }
            vec![Some(Tensor::from_parts(t.shape().to_vec(), d))]
        }
        Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
            let t = v(x);
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let mut k = g.data()[0];
                    if mean {
                        k /= t.len().max(1) as f64;
                    }
                    vec![Some(Tensor::filled(t.shape(), k))]
                }
                Some(ax) => {
                    let (outer, n, inner) = axis_split(t.shape(), *ax);
                    let scale = if mean { 1.0 / n.max(1) as f64 } else { 1.0 };
                    let mut d = vec![0.0; t.len()];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            for (dst, &s) in d[(o * n + k) * inner..(o * n + k + 1) * inner].iter_mut().zip(src) {
                                *dst = s * scale;
                            }
                        }
                    }
                    vec![Some(Tensor::from_parts(t.shape().to_vec(), d))]
                }
            }
        }
        Op::Cholesky(_) => {
            // Ā = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, then folded onto the lower triangle that was read.
            let n = out.rows();
            let l = out;
            let mut lbar = g.clone();
            tril(&mut lbar);
            let mut phi = l.transpose().matmul(&lbar).expect("square factors");
            tril(&mut phi);
            for i in 0..n {
                phi.data_mut()[i * n + i] *= 0.5;
            }
            let z = solve(l, &phi, true);
            let abar = solve(l, &z.transpose(), true).transpose();
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    d[i * n + j] = if i == j {
                        abar.data()[i * n + i]
                    } else {
                        abar.data()[i * n + j] + abar.data()[j * n + i]
                    };
                }
            }
            vec![Some(Tensor::from_parts(vec![n, n], d))]
        }
        Op::SolveLower { l, transpose, .. } => {
            let tl = v(l);
            let x = out;
            let n = tl.rows();
            let m = x.len() / n;
            let x2 = Tensor::from_parts(vec![n, m], x.data().to_vec());
            let g2 = Tensor::from_parts(vec![n, m], g.data().to_vec());
            let bbar = solve(tl, &g2, !*transpose);
            let gl = want(0).then(|| {
                let mut d = vec![0.0; n * n];
                if *transpose {
                    matmul_nt_into(x2.data(), bbar.data(), &mut d, n, n, m);
                } else {
                    matmul_nt_into(bbar.data(), x2.data(), &mut d, n, n, m);
                }
                let mut t = Tensor::from_parts(vec![n, n], d.into_iter().map(|v| -v).collect());
                tril(&mut t);
                t
            });
            let gb = want(1).then(|| Tensor::from_parts(g.shape().to_vec(), bbar.into_data()));
            vec![gl, gb]
        }
    }
}
