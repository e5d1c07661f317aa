use crate::error::{AutodiffError, Result};
use crate::tape::{Node, Tape, Var};
use crate::tensor::{split_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Sqrt,
    Powf(f64),
    Neg,
    Scale(f64),
    AddScalar(f64),
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// rhs shape is a trailing suffix of lhs shape.
    Suffix(usize),
    /// rhs shape equals lhs shape with the last axis collapsed to 1.
    Row(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::Row(last) => i / last,
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Binary { kind: BinKind, lhs: Var, rhs: Var, bcast: Bcast },
    Unary { kind: UnKind, x: Var },
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, argmax: Vec<usize> },
    SumAll { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Gather { x: Var, indices: Vec<usize> },
    ScatterAdd { x: Var, indices: Vec<usize> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::MatMul { a, b } | Op::BatchMatMul { a, b } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Max { x, .. }
            | Op::SumAll { x }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. } => vec![*x],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn resolve_bcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Same);
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(Bcast::Scalar);
    }
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Bcast::Suffix(rn));
    }
    if rhs.len() == lhs.len()
        && rhs.last() == Some(&1)
        && lhs[..lhs.len() - 1] == rhs[..rhs.len() - 1]
    {
        return Ok(Bcast::Row(*lhs.last().unwrap()));
    }
    Err(AutodiffError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AutodiffError::Axis { op, axis, shape: shape.to_vec() });
    }
    Ok(())
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[k,m]^T b[k,n]
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] b[n,k]^T
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps every output position of a permutation to its source offset.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        src.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    src
}

impl Tape {
    fn binary(&mut self, kind: BinKind, lhs: Var, rhs: Var, name: &'static str) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        let bcast = resolve_bcast(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..ad.len())
            .map(|i| {
                let x = ad[i];
                let y = bd[bcast.index(i)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                    BinKind::Min => {
                        if x <= y {
                            x
                        } else {
                            y
                        }
                    }
                    BinKind::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                }
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.add_flops(value.len());
        Ok(self.record(value, Op::Binary { kind, lhs, rhs, bcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Min, a, b, "minimum")
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Max, a, b, "maximum")
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let v = self.value(x);
        let f: fn(f64, UnKind) -> f64 = |x, k| match k {
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Tanh => x.tanh(),
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Relu => x.max(0.0),
            UnKind::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnKind::Softplus => softplus(x),
            UnKind::Sqrt => x.sqrt(),
            UnKind::Powf(p) => x.powf(p),
            UnKind::Neg => -x,
            UnKind::Scale(c) => c * x,
            UnKind::AddScalar(c) => x + c,
        };
        let value = v.map(|e| f(e, kind));
        self.add_flops(value.len());
        self.record(value, Op::Unary { kind, x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(AutodiffError::Domain { op: "log", msg: "negative input".into() });
        }
        Ok(self.unary(UnKind::Log, x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnKind::LeakyRelu(slope), x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnKind::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(AutodiffError::Domain { op: "sqrt", msg: "negative input".into() });
        }
        Ok(self.unary(UnKind::Sqrt, x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(UnKind::Powf(p), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::AddScalar(c), x)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, 1.0)
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.add_flops(m * k * n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, Op::MatMul { a, b }))
    }

    /// Batched product `[B,m,k] x [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::Shape { op: "bmm", lhs: sa, rhs: sb });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..bs {
                matmul_into(
                    &ad[t * m * k..(t + 1) * m * k],
                    &bd[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.add_flops(bs * m * k * n);
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.record(value, Op::BatchMatMul { a, b }))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let v = self.value(x);
        check_axis(name, v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY || m.is_nan() {
                    return Err(AutodiffError::Domain {
                        op: name,
                        msg: "no finite entry along the softmax axis".into(),
                    });
                }
                let z: f64 = (0..len).map(|j| (d[at(j)] - m).exp()).sum();
                let lz = z.ln();
                for j in 0..len {
                    out[at(j)] = if log { d[at(j)] - m - lz } else { (d[at(j)] - m).exp() / z };
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.add_flops(3 * value.len());
        let op = if log { Op::LogSoftmax { x, axis } } else { Op::Softmax { x, axis } };
        Ok(self.record(value, op))
    }

    /// Max-shifted softmax along `axis`. Entries equal to `-inf` get zero mass.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn reduce_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keepdim || s.len() == 1 {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let v = self.value(x);
        check_axis("sum", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean {
            for e in &mut out {
                *e /= len as f64;
            }
        }
        let (n, shape) = (v.len(), Self::reduce_shape(v.shape(), axis, keepdim));
        self.add_flops(n);
        let value = Tensor::new(shape, out)?;
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.record(value, op))
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, true)
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(x);
        check_axis("max", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for j in 0..len {
                    let e = d[o * len * inner + j * inner + i];
                    if e > bv || j == 0 {
                        bv = e;
                        best = j;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        let (n, shape) = (v.len(), Self::reduce_shape(v.shape(), axis, keepdim));
        self.add_flops(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Max { x, axis, argmax }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum();
        self.add_flops(v.len());
        self.record(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(AutodiffError::Domain { op: "concat", msg: "no inputs".into() });
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("slice", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if start >= end || end > len {
            return Err(AutodiffError::Index { op: "slice", index: end, extent: len });
        }
        let w = end - start;
        let d = v.data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[o * len * inner + start * inner..o * len * inner + end * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(value, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::Shape { op: "permute", lhs: v.shape().to_vec(), rhs: perm.to_vec() });
        }
        let src = permute_sources(v.shape(), perm);
        let d = v.data();
        let out: Vec<f64> = src.iter().map(|&s| d[s]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(AutodiffError::Axis { op: "transpose", axis: 1, shape: self.shape(x).to_vec() });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    /// Selects rows along axis 0.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape()[0];
        let row_len = v.len() / rows;
        if indices.is_empty() {
            return Err(AutodiffError::Domain { op: "gather", msg: "empty index list".into() });
        }
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &r in indices {
            if r >= rows {
                return Err(AutodiffError::Index { op: "gather", index: r, extent: rows });
            }
            out.extend_from_slice(&v.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        self.add_flops(value.len());
        Ok(self.record(value, Op::Gather { x, indices: indices.to_vec() }))
    }

    /// Sums rows of `x` into `rows` output rows: `out[indices[r]] += x[r]`.
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let v = self.value(x);
        if indices.len() != v.shape()[0] {
            return Err(AutodiffError::Shape { op: "scatter_add", lhs: v.shape().to_vec(), rhs: vec![indices.len()] });
        }
        let row_len = v.len() / v.shape()[0];
        let mut out = vec![0.0; rows * row_len];
        for (r, &dst) in indices.iter().enumerate() {
            if dst >= rows {
                return Err(AutodiffError::Index { op: "scatter_add", index: dst, extent: rows });
            }
            let src = &v.data()[r * row_len..(r + 1) * row_len];
            for (o, s) in out[dst * row_len..(dst + 1) * row_len].iter_mut().zip(src) {
                *o += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows;
        self.add_flops(v.len());
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::ScatterAdd { x, indices: indices.to_vec() }))
    }
}

/// Vector-Jacobian products of `node` given its output gradient `g`.
pub(crate) fn backward(tape: &Tape, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| tape.value(v);
    let y = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, lhs, rhs, bcast } => {
            let (a, b) = (val(*lhs), val(*rhs));
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for i in 0..ad.len() {
                let j = bcast.index(i);
                let (x, z, gi) = (ad[i], bd[j], gd[i]);
                let (da, db) = match kind {
                    BinKind::Add => (1.0, 1.0),
                    BinKind::Sub => (1.0, -1.0),
                    BinKind::Mul => (z, x),
                    BinKind::Div => (1.0 / z, -x / (z * z)),
                    BinKind::Min => {
                        if x <= z {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    BinKind::Max => {
                        if x >= z {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                };
                if da != 0.0 {
                    ga[i] += gi * da;
                }
                if db != 0.0 {
                    gb[j] += gi * db;
                }
            }
            vec![
                (*lhs, Tensor::new(a.shape().to_vec(), ga).unwrap()),
                (*rhs, Tensor::new(b.shape().to_vec(), gb).unwrap()),
            ]
        }
        Op::Unary { kind, x } => {
            let xv = val(*x);
            let data: Vec<f64> = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| {
                    let d = match kind {
                        UnKind::Exp => yi,
                        UnKind::Log => 1.0 / xi,
                        UnKind::Tanh => 1.0 - yi * yi,
                        UnKind::Sigmoid => yi * (1.0 - yi),
                        UnKind::Relu => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::LeakyRelu(s) => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                *s
                            }
                        }
                        UnKind::Softplus => sigmoid(xi),
                        UnKind::Sqrt => 0.5 / yi,
                        UnKind::Powf(p) => p * xi.powf(p - 1.0),
                        UnKind::Neg => -1.0,
                        UnKind::Scale(c) => *c,
                        UnKind::AddScalar(_) => 1.0,
                    };
                    gi * d
                })
                .collect();
            vec![(*x, Tensor::new(xv.shape().to_vec(), data).unwrap())]
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut ga = vec![0.0; m * k];
            matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
            let mut gb = vec![0.0; k * n];
            matmul_tn_into(av.data(), g.data(), &mut gb, k, m, n);
            vec![
                (*a, Tensor::new(vec![m, k], ga).unwrap()),
                (*b, Tensor::new(vec![k, n], gb).unwrap()),
            ]
        }
        Op::BatchMatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for t in 0..bs {
                let gs = &g.data()[t * m * n..(t + 1) * m * n];
                matmul_nt_into(gs, &bv.data()[t * k * n..(t + 1) * k * n], &mut ga[t * m * k..(t + 1) * m * k], m, n, k);
                matmul_tn_into(&av.data()[t * m * k..(t + 1) * m * k], gs, &mut gb[t * k * n..(t + 1) * k * n], k, m, n);
            }
            vec![
                (*a, Tensor::new(av.shape().to_vec(), ga).unwrap()),
                (*b, Tensor::new(bv.shape().to_vec(), gb).unwrap()),
            ]
        }
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    if log {
                        let gsum: f64 = (0..len).map(|j| gd[at(j)]).sum();
                        for j in 0..len {
                            let p = yd[at(j)].exp();
                            out[at(j)] = gd[at(j)] - p * gsum;
                        }
                    } else {
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
            }
            vec![(*x, Tensor::new(y.shape().to_vec(), out).unwrap())]
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
            let gd = g.data();
            let mut out = vec![0.0; xv.len()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * len * inner + j * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), out).unwrap())]
        }
        Op::Max { x, axis, argmax } => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let gd = g.data();
            let mut out = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let j = argmax[o * inner + i];
                    out[o * len * inner + j * inner + i] = gd[o * inner + i];
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), out).unwrap())]
        }
        Op::SumAll { x } => {
            let xv = val(*x);
            vec![(*x, Tensor::full(xv.shape(), g.item()))]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut res = Vec::with_capacity(xs.len());
            let mut offset = 0;
            for &x in xs {
                let shape = val(x).shape().to_vec();
                let len = shape[*axis];
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * total * inner + offset * inner;
                    out.extend_from_slice(&g.data()[base..base + len * inner]);
                }
                offset += len;
                res.push((x, Tensor::new(shape, out).unwrap()));
            }
            res
        }
        Op::Slice { x, axis, start } => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let w = y.shape()[*axis];
            let mut out = vec![0.0; xv.len()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                out[dst..dst + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), out).unwrap())]
        }
        Op::Reshape { x } => {
            let shape = val(*x).shape().to_vec();
            vec![(*x, g.clone().reshaped(&shape).unwrap())]
        }
        Op::Permute { x, perm } => {
            let xv = val(*x);
            let src = permute_sources(xv.shape(), perm);
            let mut out = vec![0.0; xv.len()];
            for (o, &s) in src.iter().enumerate() {
                out[s] = g.data()[o];
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), out).unwrap())]
        }
        Op::Gather { x, indices } => {
            let xv = val(*x);
            let row_len = xv.len() / xv.shape()[0];
            let mut out = vec![0.0; xv.len()];
            for (r, &src) in indices.iter().enumerate() {
                for c in 0..row_len {
                    out[src * row_len + c] += g.data()[r * row_len + c];
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), out).unwrap())]
        }
        Op::ScatterAdd { x, indices } => {
            let xv = val(*x);
            let row_len = xv.len() / xv.shape()[0];
            let mut out = Vec::with_capacity(xv.len());
            for &dst in indices {
                out.extend_from_slice(&g.data()[dst * row_len..(dst + 1) * row_len]);
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), out).unwrap())]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_sources_transpose() {
        // [[0,1,2],[3,4,5]] transposed -> [[0,3],[1,4],[2,5]]
        assert_eq!(permute_sources(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn bcast_resolution() {
        assert_eq!(resolve_bcast("t", &[2, 3], &[2, 3]).unwrap(), Bcast::Same);
        assert_eq!(resolve_bcast("t", &[2, 3], &[1]).unwrap(), Bcast::Scalar);
        assert_eq!(resolve_bcast("t", &[4, 2, 3], &[2, 3]).unwrap(), Bcast::Suffix(6));
        assert_eq!(resolve_bcast("t", &[4, 3], &[4, 1]).unwrap(), Bcast::Row(3));
        assert!(resolve_bcast("t", &[4, 3], &[4]).is_err());
    }
}
