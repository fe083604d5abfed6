//! Define-by-run tape. Each primitive computes its forward value eagerly,
//! records what backward needs, and checks its output for NaN/Inf.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{shape_err, Gradients, ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key validity for a masked softmax over the last dimension.
///
/// Row `r` of the input uses `keys[(r / rows_per_entry) * n ..][..n]`;
/// masked keys get probability exactly zero (equivalent to a `-inf` logit).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMask {
    pub keys: Vec<bool>,
    pub rows_per_entry: usize,
}

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Softmax(Var),
    Embedding(Vec<(ParamId, usize)>),
    Dropout(Var, Vec<S>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<'p, S: Real = f64> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
}

fn check<S: Real>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<'p, S: Real> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check(op_name, &value)?;
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input (gradients are reported for it).
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `[g,m,k] x [g,k,n] -> [g,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[g, m, n]);
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..g {
                gemm_nn(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut od[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.push("batch_matmul", out, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a vector matching the last dimension
    /// of `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let mut out = self.value(a).clone();
            out.add_assign(self.value(b));
            return self.push("add", out, Op::Add(a, b), &[a, b]);
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let n = sb[0];
            let mut out = self.value(a).clone();
            let bd = self.value(b).data();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &v) in row.iter_mut().zip(bd) {
                    *o += v;
                }
            }
            return self.push("add", out, Op::AddBroadcast(a, b), &[a, b]);
        }
        Err(shape_err("add", format!("{:?} + {:?}", sa, sb)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let bd = self.value(b).data();
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(bd).map(|(&x, &y)| x * y).collect(),
        )?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Swap the last two dimensions of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let axes: Vec<usize> = match s.len() {
            2 => vec![1, 0],
            3 => vec![0, 2, 1],
            _ => return Err(shape_err("transpose", format!("{:?}", s))),
        };
        let out = permute_data(self.value(a), &axes);
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || core::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {:?} for shape {:?}", axes, s)));
        }
        let out = permute_data(self.value(a), axes);
        self.push("permute", out, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", format!("no inputs")))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {} for {:?}", axis, base)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", format!("{}..{} on axis {} of {:?}", start, end, axis, s)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Rows of a 2-D tensor, by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", format!("{:?}", s)));
        }
        let n = s[1];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= s[0] {
                return Err(TensorError::Index { op: "gather_rows", index: r, bound: s[0] });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        self.push("gather_rows", out, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(S::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::log_sigmoid);
        self.push("log_sigmoid", out, Op::LogSigmoid(a), &[a])
    }

    /// Normalize over the last dimension, then apply `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| shape_err("layer_norm", format!("scalar input")))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xs, self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = S::from_f64(eps);
        let nf = S::from_f64(n as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / n.max(1);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xs, out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Softmax over the last dimension, with max-subtraction.
    pub fn row_softmax(&mut self, a: Var, mask: Option<&SoftmaxMask>) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        let rows = t.rows();
        if let Some(m) = mask {
            if m.rows_per_entry == 0 || m.keys.len() != rows.div_ceil(m.rows_per_entry) * n {
                return Err(shape_err(
                    "row_softmax",
                    format!("mask of {} keys for {} rows of width {}", m.keys.len(), rows, n),
                ));
            }
        }
        let mut out = Tensor::zeros(t.shape());
        for r in 0..rows {
            let keys = mask.map(|m| &m.keys[(r / m.rows_per_entry) * n..][..n]);
            let valid = |j: usize| keys.map_or(true, |k| k[j]);
            let src = t.row(r);
            let mut max = S::neg_infinity();
            for (j, &v) in src.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(shape_err("row_softmax", format!("row {} has no unmasked entry", r)));
            }
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            let mut total = S::zero();
            for (j, &v) in src.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        self.push("row_softmax", out, Op::Softmax(a), &[a])
    }

    /// Gathers `(table, row)` pairs from parameter matrices into an `[N, d]`
    /// tensor without copying the tables onto the tape.
    pub fn embedding_lookup(&mut self, lookups: &[(ParamId, usize)]) -> Result<Var> {
        let mut width = None;
        let mut data = Vec::new();
        for &(pid, row) in lookups {
            let table = self.params.get(pid);
            if table.ndim() != 2 {
                return Err(shape_err("embedding_lookup", format!("table {:?}", table.shape())));
            }
            let d = table.shape()[1];
            if *width.get_or_insert(d) != d {
                return Err(shape_err("embedding_lookup", format!("mixed widths {:?} and {}", width, d)));
            }
            if row >= table.shape()[0] {
                return Err(TensorError::Index { op: "embedding_lookup", index: row, bound: table.shape()[0] });
            }
            data.extend_from_slice(table.row(row));
        }
        let out = Tensor::new(vec![lookups.len(), width.unwrap_or(0)], data)?;
        check("embedding_lookup", &out)?;
        self.nodes.push(Node {
            value: Value::Owned(out),
            op: Op::Embedding(lookups.to_vec()),
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inverted dropout; a no-op (still recorded) when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("probability {}", p)));
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let t = self.value(a);
        let mask: Vec<S> = (0..t.numel())
            .map(|_| if p > 0.0 && rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        self.push("dropout", out, Op::Dropout(a, mask), &[a])
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[rows]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        if t.ndim() == 0 || c == 0 || t.rows() != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", t.shape(), targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut losses = Vec::with_capacity(targets.len());
        for (r, &target) in targets.iter().enumerate() {
            if target >= c {
                return Err(TensorError::Index { op: "cross_entropy", index: target, bound: c });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let total: S = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            losses.push(log_z - row[target]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let out = Tensor::new(vec![targets.len()], losses)?;
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum::<S>() / S::from_f64(t.numel().max(1) as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<S>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&shape, S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut pgrads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params: pgrads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        pgrads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => accum_param(pgrads, *id, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm_nt(g.data(), bv.data(), ga.data_mut(), m, n, k);
                    self.accum(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm_tn(av.data(), g.data(), gb.data_mut(), m, k, n);
                    self.accum(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                let gd = g.data();
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(&[bs, m, k]);
                    for j in 0..bs {
                        gemm_nt(
                            &gd[j * m * n..(j + 1) * m * n],
                            &bv.data()[j * k * n..(j + 1) * k * n],
                            &mut ga.data_mut()[j * m * k..(j + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(&[bs, k, n]);
                    for j in 0..bs {
                        gemm_tn(
                            &av.data()[j * m * k..(j + 1) * m * k],
                            &gd[j * m * n..(j + 1) * m * n],
                            &mut gb.data_mut()[j * k * n..(j + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accum(grads, *a, g.clone());
                let n = self.shape(*b)[0];
                let mut gb = Tensor::zeros(&[n]);
                for row in g.data().chunks(n) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accum(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                )?;
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|v| v * c));
            }
            Op::Transpose(a) => {
                let axes: &[usize] = if g.ndim() == 2 { &[1, 0] } else { &[0, 2, 1] };
                self.accum(grads, *a, permute_data(g, axes));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accum(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.accum(grads, *a, permute_data(g, &inverse));
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let total = g.shape()[axis];
                let outer: usize = g.shape()[..axis].iter().product();
                let inner: usize = g.shape()[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p).to_vec();
                    let len = ps[axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    self.accum(grads, *p, Tensor::new(ps, data)?);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (axis, start) = (*axis, *start);
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = g.shape()[axis];
                let mut gx = Tensor::zeros(&xs);
                for o in 0..outer {
                    let dst = (o * xs[axis] + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accum(grads, *x, gx);
            }
            Op::GatherRows(a, rows) => {
                let s = self.shape(*a).to_vec();
                let n = s[1];
                let mut ga = Tensor::zeros(&s);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut ga.data_mut()[r * n..(r + 1) * n];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                        *d += v;
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = zip_map(g, x, |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = zip_map(g, x, |gv, xv| gv * kernels::gelu_grad(xv))?;
                self.accum(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, out, |gv, y| gv * y * (S::one() - y))?;
                self.accum(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let ga = zip_map(g, x, |gv, xv| gv * kernels::sigmoid(-xv))?;
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.shape(*gain)[0];
                let gw = self.value(*gain).data();
                let nf = S::from_f64(n as f64);
                let mut gx = Tensor::zeros(self.shape(*x));
                let mut ggain = Tensor::zeros(&[n]);
                let mut gbias = Tensor::zeros(&[n]);
                for (r, grow) in g.data().chunks(n).enumerate() {
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..n {
                        let dh = grow[j] * gw[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        ggain.data_mut()[j] += grow[j] * h[j];
                        gbias.data_mut()[j] += grow[j];
                    }
                    mean_dh = mean_dh / nf;
                    mean_dh_h = mean_dh_h / nf;
                    let dst = &mut gx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] = rstd[r] * (grow[j] * gw[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *gain, ggain);
                self.accum(grads, *bias, gbias);
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let mut ga = Tensor::zeros(out.shape());
                for (r, (yrow, grow)) in out.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: S = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    let dst = &mut ga.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Embedding(lookups) => {
                for (k, &(pid, row)) in lookups.iter().enumerate() {
                    let table = self.params.get(pid);
                    let d = table.shape()[1];
                    let slot = pgrads[pid.0].get_or_insert_with(|| Tensor::zeros(table.shape()));
                    let dst = &mut slot.data_mut()[row * d..(row + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                        *o += v;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                )?;
                self.accum(grads, *a, ga);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).last_dim();
                let mut gl = Tensor::new(self.shape(*logits).to_vec(), probs.clone())?;
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let row = &mut gl.data_mut()[r * c..(r + 1) * c];
                    row[t] = row[t] - S::one();
                    for v in row.iter_mut() {
                        *v = *v * gr;
                    }
                }
                self.accum(grads, *logits, gl);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, Tensor::filled(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = S::from_f64(self.value(*a).numel().max(1) as f64);
                let gv = g.item() / n;
                self.accum(grads, *a, Tensor::filled(self.shape(*a), gv));
            }
        }
        Ok(())
    }
}

fn accum_param<S: Real>(pgrads: &mut [Option<Tensor<S>>], id: ParamId, g: Tensor<S>) {
    match &mut pgrads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Real>(g: &Tensor<S>, x: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    Tensor::new(g.shape().to_vec(), g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect())
}

pub(crate) fn permute_data<S: Real>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = t.shape();
    let in_strides = kernels::strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(t.data()[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor { shape: out_shape, data }
}
