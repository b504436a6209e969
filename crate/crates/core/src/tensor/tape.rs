use std::sync::Arc;

use rand::Rng;

use super::kernels::gemm;
use super::{mismatch, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module. The forward
/// value is computed by the caller and handed to [`Tape::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for each input, in input order. `None`
    /// means the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Sum { input: usize, axis: usize },
    Mean { input: usize, axis: usize },
    SumAll(usize),
    Gather { table: usize, indices: Vec<usize> },
    Linear { x: usize, w: usize, b: Option<usize> },
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { input: usize, mask: Vec<f64> },
    ContractOutgoing(usize, usize),
    ContractIncoming(usize, usize),
    Reshape(usize),
    SliceLast { input: usize, start: usize },
    BroadcastSource(usize),
    BroadcastTarget(usize),
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records executed operations in topological order. Values that need no
/// gradient are stored without their history.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaf
/// values keep their gradient; intermediate buffers are freed as soon as
/// they have been propagated.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats over trailing axes; each of its values covers
    /// `block` consecutive output values.
    Right(usize),
    Left(usize),
}

fn trimmed(shape: &[usize]) -> &[usize] {
    let mut end = shape.len();
    while end > 0 && shape[end - 1] == 1 {
        end -= 1;
    }
    &shape[..end]
}

fn broadcast_rule(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if a.shape().starts_with(trimmed(b.shape())) && a.len() >= b.len() && !b.is_empty() {
        return Ok(Broadcast::Right(a.len() / b.len()));
    }
    if b.shape().starts_with(trimmed(a.shape())) && b.len() > a.len() && !a.is_empty() {
        return Ok(Broadcast::Left(b.len() / a.len()));
    }
    Err(mismatch(op, a.shape(), b.shape()))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a shared value (typically a model parameter) without copying.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rule = broadcast_rule(name, ta, tb)?;
        let (shape, data) = match rule {
            Broadcast::Same => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Right(block) => (
                ta.shape().to_vec(),
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i / block]))
                    .collect(),
            ),
            Broadcast::Left(block) => (
                tb.shape().to_vec(),
                tb.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(ta.data()[i / block], y))
                    .collect(),
            ),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Elementwise sum. One operand may be broadcast over trailing axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.0, factor), rg)
    }

    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(mismatch("matmul", sa, sb)),
        };
        let mut data = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                false,
                &tb.data()[i * k * n..],
                false,
                &mut data[i * m * n..],
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a.0, b.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.0).collect(),
            axis,
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::InvalidArgument {
                op: "sum",
                detail: format!("axis {axis} out of range for {:?}", t.shape()),
            });
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        if mean && dim > 0 {
            data.iter_mut().for_each(|x| *x /= dim as f64);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        let op = if mean {
            Op::Mean { input: a.0, axis }
        } else {
            Op::Sum { input: a.0, axis }
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Sum of every element as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    /// Rows of a `[rows, width]` table selected by `indices`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(mismatch("embedding_lookup", t.shape(), &[indices.len()]));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "embedding_lookup",
                    detail: format!("index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table: table.0,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new([indices.len(), width], data)?, op, rg))
    }

    /// Affine map over the last axis: `x[..., in] W[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let sx = tx.shape();
        if tw.rank() != 2 || sx.is_empty() || sx[sx.len() - 1] != tw.shape()[0] {
            return Err(mismatch("linear", sx, tw.shape()));
        }
        let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.len() / fin.max(1);
        let mut data = vec![0.0; rows * fout];
        gemm(rows, fin, fout, tx.data(), false, tw.data(), false, &mut data, false);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fout] {
                return Err(mismatch("linear bias", tw.shape(), tb.shape()));
            }
            for row in data.chunks_mut(fout) {
                add_into(row, tb.data());
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = fout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let op = Op::Linear {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Softmax over the last axis. `mask` holds 0 (keep) or 1 (exclude);
    /// excluded entries come out as 0 and a fully excluded row is all zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(mismatch("softmax_rows", t.shape(), &[]));
        }
        if let Some(m) = mask {
            if m.shape() != t.shape() {
                return Err(mismatch("softmax_rows mask", t.shape(), m.shape()));
            }
        }
        let width = *t.shape().last().unwrap();
        let mut data = vec![0.0; t.len()];
        if width > 0 {
            for (r, (src, dst)) in t.data().chunks(width).zip(data.chunks_mut(width)).enumerate() {
                let keep = |j: usize| mask.is_none_or(|m| m.data()[r * width + j] == 0.0);
                let max = (0..width)
                    .filter(|&j| keep(j))
                    .map(|j| src[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..width {
                    if keep(j) {
                        dst[j] = (src[j] - max).exp();
                        total += dst[j];
                    }
                }
                dst.iter_mut().for_each(|v| *v /= total);
            }
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x.0), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`. A constant row maps to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let width = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [width] || tb.shape() != [width] || width == 0 {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / width;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * width..(r + 1) * width];
            let mu = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mu) * is;
                xhat[r * width + j] = h;
                data[r * width + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, rg))
    }

    /// Inverted dropout. Outside training (or at rate 0) this is the
    /// identity and returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1]"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep_scale = if rate < 1.0 { 1.0 / (1.0 - rate) } else { 0.0 };
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() >= rate { keep_scale } else { 0.0 })
            .collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { input: x.0, mask }, rg))
    }

    fn contract_shapes(&self, name: &'static str, q: Var, k: Var) -> Result<(usize, usize)> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 2 || sk.len() != 3 || sk[0] != sq[0] || sk[1] != sq[0] || sk[2] != sq[1] {
            return Err(mismatch(name, sq, sk));
        }
        Ok((sq[0], sq[1]))
    }

    /// `out[v,u] = sum_f q[v,f] * k[v,u,f]`: each node against its
    /// outgoing edges.
    pub fn contract_outgoing(&mut self, q: Var, k: Var) -> Result<Var> {
        let (n, f) = self.contract_shapes("contract_outgoing", q, k)?;
        let (tq, tk) = (self.value(q).data(), self.value(k).data());
        let mut data = vec![0.0; n * n];
        for v in 0..n {
            let qv = &tq[v * f..(v + 1) * f];
            for u in 0..n {
                let kv = &tk[(v * n + u) * f..(v * n + u + 1) * f];
                data[v * n + u] = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(Tensor::new([n, n], data)?, Op::ContractOutgoing(q.0, k.0), rg))
    }

    /// `out[v,u] = sum_f q[v,f] * k[u,v,f]`: each node against its
    /// incoming edges.
    pub fn contract_incoming(&mut self, q: Var, k: Var) -> Result<Var> {
        let (n, f) = self.contract_shapes("contract_incoming", q, k)?;
        let (tq, tk) = (self.value(q).data(), self.value(k).data());
        let mut data = vec![0.0; n * n];
        for v in 0..n {
            let qv = &tq[v * f..(v + 1) * f];
            for u in 0..n {
                let kv = &tk[(u * n + v) * f..(u * n + v + 1) * f];
                data[v * n + u] = qv.iter().zip(kv).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(Tensor::new([n, n], data)?, Op::ContractIncoming(q.0, k.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(mismatch("reshape", t.shape(), shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data().to_vec(),
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let width = *t.shape().last().unwrap_or(&0);
        if start + len > width {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                detail: format!("{start}..{} out of range for width {width}", start + len),
            });
        }
        let mut data = Vec::with_capacity(t.len() / width.max(1) * len);
        for row in t.data().chunks(width.max(1)) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast { input: a.0, start }, rg))
    }

    fn broadcast_pairwise(&mut self, x: Var, source: bool) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(mismatch("broadcast", t.shape(), &[]));
        }
        let (n, f) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(n * n * f);
        for u in 0..n {
            for v in 0..n {
                let r = if source { u } else { v };
                data.extend_from_slice(&t.data()[r * f..(r + 1) * f]);
            }
        }
        let rg = self.rg(x);
        let op = if source {
            Op::BroadcastSource(x.0)
        } else {
            Op::BroadcastTarget(x.0)
        };
        Ok(self.push(Tensor::new([n, n, f], data)?, op, rg))
    }

    /// `[n,f] -> [n,n,f]` with `out[u,v,:] = x[u,:]`.
    pub fn broadcast_source(&mut self, x: Var) -> Result<Var> {
        self.broadcast_pairwise(x, true)
    }

    /// `[n,f] -> [n,n,f]` with `out[u,v,:] = x[v,:]`.
    pub fn broadcast_target(&mut self, x: Var) -> Result<Var> {
        self.broadcast_pairwise(x, false)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let op = Op::Custom {
            inputs: inputs.iter().map(|v| v.0).collect(),
            op,
        };
        self.push(output, op, rg)
    }

    /// Propagates gradients from a scalar `loss` to every recorded value
    /// that requires them. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, &mut grads, node, &g);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Returns the gradient buffer of `idx` if that node wants one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], idx: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
}

fn reduce_broadcast(dst: &mut [f64], g: &[f64], block: usize, scale: impl Fn(usize) -> f64) {
    for (i, gi) in g.iter().enumerate() {
        dst[i / block] += gi * scale(i);
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let rule = broadcast_rule("add", val(*a), val(*b)).expect("shapes checked forward");
            if let Some(da) = slot(nodes, grads, *a) {
                match rule {
                    Broadcast::Left(block) => reduce_broadcast(da, g, block, |_| 1.0),
                    _ => add_into(da, g),
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                match rule {
                    Broadcast::Right(block) => reduce_broadcast(db, g, block, |_| sign),
                    _ => db.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x),
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let rule = broadcast_rule("mul", ta, tb).expect("shapes checked forward");
            if let Some(da) = slot(nodes, grads, *a) {
                match rule {
                    Broadcast::Same => {
                        for ((d, gi), y) in da.iter_mut().zip(g).zip(tb.data()) {
                            *d += gi * y;
                        }
                    }
                    Broadcast::Right(block) => {
                        for (i, (d, gi)) in da.iter_mut().zip(g).enumerate() {
                            *d += gi * tb.data()[i / block];
                        }
                    }
                    Broadcast::Left(block) => reduce_broadcast(da, g, block, |i| tb.data()[i]),
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                match rule {
                    Broadcast::Same => {
                        for ((d, gi), x) in db.iter_mut().zip(g).zip(ta.data()) {
                            *d += gi * x;
                        }
                    }
                    Broadcast::Left(block) => {
                        for (i, (d, gi)) in db.iter_mut().zip(g).enumerate() {
                            *d += gi * ta.data()[i / block];
                        }
                    }
                    Broadcast::Right(block) => reduce_broadcast(db, g, block, |i| ta.data()[i]),
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x);
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let sa = ta.shape();
            let (batch, m, k) = if sa.len() == 2 {
                (1, sa[0], sa[1])
            } else {
                (sa[0], sa[1], sa[2])
            };
            let n = *tb.shape().last().unwrap();
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..batch {
                    // dA = G B^T
                    gemm(m, n, k, &g[i * m * n..], false, &tb.data()[i * k * n..], true, &mut da[i * m * k..], true);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..batch {
                    // dB = A^T G
                    gemm(k, m, n, &ta.data()[i * m * k..], true, &g[i * m * n..], false, &mut db[i * k * n..], true);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in inputs {
                let width = val(p).shape()[*axis];
                if let Some(dp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                        add_into(&mut dp[o * width * inner..(o + 1) * width * inner], src);
                    }
                }
                offset += width;
            }
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let (outer, dim, inner) = split_axis(val(*input).shape(), *axis);
            let scale = if matches!(node.op, Op::Mean { .. }) {
                1.0 / dim as f64
            } else {
                1.0
            };
            if let Some(da) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    for d in 0..dim {
                        let dst = &mut da[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (x, gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x += gi * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Gather { table, indices } => {
            let width = val(*table).shape()[1];
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut dt[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (val(*x), val(*w));
            let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
            let rows = tx.len() / fin.max(1);
            if let Some(dx) = slot(nodes, grads, *x) {
                gemm(rows, fout, fin, g, false, tw.data(), true, dx, true);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                gemm(fin, rows, fout, tx.data(), true, g, false, dw, true);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks(fout) {
                        add_into(db, row);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let width = *out.shape().last().unwrap();
            if let Some(da) = slot(nodes, grads, *a) {
                if width > 0 {
                    for ((y, gr), d) in out.data().chunks(width).zip(g.chunks(width)).zip(da.chunks_mut(width)) {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            d[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let tg = val(*gain).data();
            let width = tg.len();
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (h, gr) in xhat.chunks(width).zip(g.chunks(width)) {
                    for j in 0..width {
                        dg[j] += gr[j] * h[j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for gr in g.chunks(width) {
                    add_into(db, gr);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let wf = width as f64;
                for (r, ((h, gr), d)) in xhat.chunks(width).zip(g.chunks(width)).zip(dx.chunks_mut(width)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..width {
                        let dh = gr[j] * tg[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    let is = inv_std[r];
                    for j in 0..width {
                        let dh = gr[j] * tg[j];
                        d[j] += is / wf * (wf * dh - sum_dh - h[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Dropout { input, mask } => {
            if let Some(da) = slot(nodes, grads, *input) {
                for ((d, gi), m) in da.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::ContractOutgoing(q, k) | Op::ContractIncoming(q, k) => {
            let incoming = matches!(node.op, Op::ContractIncoming(..));
            let (tq, tk) = (val(*q), val(*k));
            let (n, f) = (tq.shape()[0], tq.shape()[1]);
            let edge = |v: usize, u: usize| if incoming { u * n + v } else { v * n + u };
            if let Some(dq) = slot(nodes, grads, *q) {
                for v in 0..n {
                    for u in 0..n {
                        let gv = g[v * n + u];
                        let e = edge(v, u);
                        let kv = &tk.data()[e * f..(e + 1) * f];
                        for (d, kk) in dq[v * f..(v + 1) * f].iter_mut().zip(kv) {
                            *d += gv * kk;
                        }
                    }
                }
            }
            if let Some(dk) = slot(nodes, grads, *k) {
                for v in 0..n {
                    let qv = &tq.data()[v * f..(v + 1) * f];
                    for u in 0..n {
                        let gv = g[v * n + u];
                        let e = edge(v, u);
                        for (d, qq) in dk[e * f..(e + 1) * f].iter_mut().zip(qv) {
                            *d += gv * qq;
                        }
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
        }
        Op::SliceLast { input, start } => {
            let width = *val(*input).shape().last().unwrap();
            let len = *out.shape().last().unwrap();
            if let Some(da) = slot(nodes, grads, *input) {
                if len > 0 {
                    for (dst, src) in da.chunks_mut(width).zip(g.chunks(len)) {
                        add_into(&mut dst[*start..start + len], src);
                    }
                }
            }
        }
        Op::BroadcastSource(a) | Op::BroadcastTarget(a) => {
            let source = matches!(node.op, Op::BroadcastSource(_));
            let (n, f) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for u in 0..n {
                    for v in 0..n {
                        let r = if source { u } else { v };
                        add_into(&mut da[r * f..(r + 1) * f], &g[(u * n + v) * f..(u * n + v + 1) * f]);
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let tensors: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let parts = op.backward(&tensors, out, g);
            for (&i, part) in inputs.iter().zip(parts) {
                if let (Some(part), Some(d)) = (part, slot(nodes, grads, i)) {
                    add_into(d, &part);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b) < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2]));
        let y = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mask = Tensor::new([2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = t.softmax_rows(x, Some(&mask)).unwrap();
        let d = t.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([2, 4], 3.5));
        let g = t.constant(Tensor::full([4], 1.0));
        let b = t.constant(Tensor::zeros([4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(3));
        let x = random(&[3, 4], 1);
        let xv = t.constant(x.clone());
        let y = t.matmul(i, xv).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([4, 5]));
        let e = t.matmul(a, b).unwrap_err();
        assert_eq!(e.to_string(), "shape mismatch in matmul: [2, 3] vs [4, 5]");
        assert!(t.add(a, b).is_err());
        let c = t.constant(Tensor::zeros([2, 1, 3]));
        assert!(t.mul(a, c).is_err());
    }

    #[test]
    fn trailing_broadcast() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = t.constant(Tensor::full([2, 2, 3], 1.0));
        let y = t.mul(m, k).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 2, 3]);
        assert_eq!(t.value(y).at(&[1, 0, 2]), 3.0);
        let s = t.constant(Tensor::scalar(2.0));
        let z = t.mul(s, m).unwrap();
        assert_eq!(t.value(z).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let x = random(&[3, 4], 2);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let s = t.sum_all(xv);
        let g = t.backward(s).unwrap();
        assert!(g.get(xv).unwrap().data().iter().all(|&v| v == 1.0));

        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let sq = t.mul(xv, xv).unwrap();
        let s = t.sum_all(sq);
        let g = t.backward(s).unwrap();
        let twice = Tensor::from_fn([3, 4], |i| 2.0 * x.data()[i]);
        assert_close(g.get(xv).unwrap(), &twice, 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([2]), true);
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_do_not_record_history() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2]));
        let b = t.exp(a);
        assert!(!t.requires_grad(b));
        let p = t.leaf(Tensor::zeros([2]), true);
        let c = t.add(b, p).unwrap();
        assert!(t.requires_grad(c));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full([1000], 1.0), true);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.25, true, &mut rng).unwrap();
        let vals = t.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn composite_softmax_matmul_graph() {
        let x = random(&[3, 4], 4);
        let w = random(&[4, 2], 5);
        let err = finite_difference_check(
            |t, xv| {
                let s = t.softmax_rows(xv, None)?;
                let wv = t.constant(w.clone());
                let y = t.matmul(s, wv)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn custom_op_receives_gradient() {
        struct Square;
        impl CustomOp for Square {
            fn name(&self) -> &'static str {
                "square"
            }
            fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
                vec![Some(inputs[0].data().iter().zip(grad).map(|(x, g)| 2.0 * x * g).collect())]
            }
        }
        let x = random(&[5], 6);
        let err = finite_difference_check(
            |t, xv| {
                let v = t.value(xv);
                let out = Tensor::from_fn([5], |i| v.data()[i] * v.data()[i]);
                let y = t.custom(&[xv], out, Box::new(Square));
                Ok(t.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
