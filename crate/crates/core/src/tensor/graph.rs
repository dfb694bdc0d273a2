use super::kernels::{gemm, Float};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<T>, count: usize },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, b: Var },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    ColumnMask { a: Var, keep: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record. Nodes are created in topological order,
/// so a reverse sweep over indices is a valid backward traversal.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the requires-grad leaves reached by a backward pass.
pub struct Grads<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation; derivative of the same formula
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let t = (c * (x + k * x3)).tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a @ b` (or `a @ b^T` when `trans_b`), with `a` viewed as `[rows, k]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(Error::shape(format!("matmul rhs must be 2-d, got {:?}", bv.shape())));
        }
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out_shape = av.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(out_shape);
        let sb = if trans_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, T::one(), av.data(), (k, 1), bv.data(), sb, T::zero(), out.data_mut(), (n, 1));
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor { shape: av.shape().to_vec(), data };
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a vector of length `cols(a)` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.numel() != av.cols() {
            return Err(Error::shape(format!(
                "add_row: row of {} elements for {:?}",
                rv.numel(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        let r = rv.data();
        for chunk in out.data_mut().chunks_mut(r.len()) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor { shape: av.shape().to_vec(), data };
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale { a, s }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = av.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (d[base + j * inner] - mx).exp();
                    d[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    d[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape(format!("layer_norm params must have {cols} elements")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let n = T::lit(cols as f64);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * cols..(r + 1) * cols];
            let o = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Gathers rows of `table` (`[vocab, dim]`); output is `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding table must be 2-d"));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of zero ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocabulary size {vocab}")));
            }
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor { shape: vec![ids.len(), dim], data };
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean token cross entropy over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index(format!("target id {t} >= vocabulary size {vocab}")));
            }
            let z = &lv.data()[r * vocab..(r + 1) * vocab];
            let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut sum = T::zero();
            for (pi, &zi) in p.iter_mut().zip(z) {
                *pi = (zi - mx).exp();
                sum += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= sum;
            }
            total += (mx + sum.ln() - z[t]).as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("cross_entropy: every position is ignored"));
        }
        let out = Tensor::scalar(T::lit(total / count as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::lit(av.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, &[a, b]))
    }

    /// Multi-head causal self-attention over packed projections.
    ///
    /// `qkv` is `[batch * seq, 3 * d]`, laid out as `[q heads | k heads | v heads]`
    /// with each head occupying `d / heads` contiguous columns. Returns the
    /// concatenated head outputs, `[batch * seq, d]`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        if qv.rows() != batch * seq || !qv.cols().is_multiple_of(3 * heads) {
            return Err(Error::shape(format!(
                "attention: qkv {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                qv.shape()
            )));
        }
        let d = qv.cols() / 3;
        let dh = d / heads;
        let stride = 3 * d;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(vec![batch * seq, d]);
        let q = qv.data();
        for b in 0..batch {
            let row0 = b * seq * stride;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let qo = row0 + h * dh;
                let ko = row0 + d + h * dh;
                let vo = row0 + 2 * d + h * dh;
                gemm(seq, dh, seq, scale, &q[qo..], (stride, 1), &q[ko..], (1, stride), T::zero(), p, (seq, 1));
                for i in 0..seq {
                    let r = &mut p[i * seq..(i + 1) * seq];
                    let mx = r[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in r[..=i].iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in r[..=i].iter_mut() {
                        *x /= sum;
                    }
                    for x in r[i + 1..].iter_mut() {
                        *x = T::zero();
                    }
                }
                let oo = b * seq * d + h * dh;
                gemm(seq, seq, dh, T::one(), p, (seq, 1), &q[vo..], (stride, 1), T::zero(), &mut out.data_mut()[oo..], (d, 1));
            }
        }
        Ok(self.push(out, Op::CausalAttention { qkv, batch, seq, heads, probs }, &[qkv]))
    }

    /// Per-column 0/1 mask over the last axis. With `zero_forward` the value is
    /// masked too; otherwise the forward pass is the identity and only the
    /// gradient flowing back through this node is masked.
    pub fn column_mask(&mut self, a: Var, keep: &[bool], zero_forward: bool) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.cols() {
            return Err(Error::shape(format!(
                "column_mask: {} flags for {} columns",
                keep.len(),
                av.cols()
            )));
        }
        let keep: Vec<T> = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        let mut out = av.clone();
        if zero_forward {
            for chunk in out.data_mut().chunks_mut(keep.len()) {
                for (x, &k) in chunk.iter_mut().zip(&keep) {
                    *x *= k;
                }
            }
        }
        Ok(self.push(out, Op::ColumnMask { a, keep }, &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Deterministic: the traversal order
    /// and every accumulation order depend only on the graph.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, node, g, &mut grads, &mut leaves);
        }
        Ok(Grads { leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn propagate(
        &self,
        i: usize,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<Tensor<T>>],
    ) {
        match &node.op {
            Op::Leaf => {
                leaves[i] = Some(Tensor { shape: node.value.shape().to_vec(), data: g });
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC @ B^T
                    let sb = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, T::one(), &g, (n, 1), bv.data(), sb, T::one(), ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB[n,k] = dC^T @ A
                        gemm(n, m, k, T::one(), &g, (1, n), av.data(), (k, 1), T::one(), gb, (k, 1));
                    } else {
                        // dB[k,n] = A^T @ dC
                        gemm(k, m, n, T::one(), av.data(), (1, k), &g, (n, 1), T::one(), gb, (n, 1));
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let cols = gr.len();
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *x += gy * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &gy), &y) in gb.iter_mut().zip(&g).zip(av) {
                        *x += gy * y;
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &xi) in ga.iter_mut().zip(&g).zip(av) {
                        *x += gy * gelu_parts(xi).1;
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let base = o * len * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                let k = base + j * inner;
                                dot += g[k] * y[k];
                            }
                            for j in 0..*len {
                                let k = base + j * inner;
                                ga[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * xr[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::lit(cols as f64);
                    let mut dxh = vec![T::zero(); cols];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            dxh[c] = gr[c] * gv[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xr[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += *rs * (dxh[c] - m1 - xr[c] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / T::lit(*count as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let out = &mut gl[r * vocab..(r + 1) * vocab];
                        for (x, &pi) in out.iter_mut().zip(p) {
                            *x += pi * scale;
                        }
                        out[t] -= scale;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / T::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = T::lit(2.0) * g[0] / T::lit(av.len() as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &p), &q) in ga.iter_mut().zip(av).zip(bv) {
                        *x += s * (p - q);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &p), &q) in gb.iter_mut().zip(av).zip(bv) {
                        *x -= s * (p - q);
                    }
                }
            }
            Op::CausalAttention { qkv, batch, seq, heads, probs } => {
                let qv = self.value(*qkv).data();
                let d = node.value.cols();
                let (seq, heads) = (*seq, *heads);
                let dh = d / heads;
                let stride = 3 * d;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let Some(gq) = self.slot(grads, *qkv) else { return };
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..*batch {
                    let row0 = b * seq * stride;
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let (qo, ko, vo) = (row0 + h * dh, row0 + d + h * dh, row0 + 2 * d + h * dh);
                        let go = b * seq * d + h * dh;
                        // dV = P^T @ dZ
                        gemm(seq, seq, dh, T::one(), p, (1, seq), &g[go..], (d, 1), T::one(), &mut gq[vo..], (stride, 1));
                        // dP = dZ @ V^T
                        gemm(seq, dh, seq, T::one(), &g[go..], (d, 1), &qv[vo..], (1, stride), T::zero(), &mut dp, (seq, 1));
                        // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..seq {
                                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
                            }
                        }
                        // dQ = dS @ K ; dK = dS^T @ Q
                        gemm(seq, seq, dh, T::one(), &dp, (seq, 1), &qv[ko..], (stride, 1), T::one(), &mut gq[qo..], (stride, 1));
                        gemm(seq, seq, dh, T::one(), &dp, (1, seq), &qv[qo..], (stride, 1), T::one(), &mut gq[ko..], (stride, 1));
                    }
                }
            }
            Op::ColumnMask { a, keep } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let cols = keep.len();
                    for (out, gr) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            out[c] += gr[c] * keep[c];
                        }
                    }
                }
            }
        }
    }
}
