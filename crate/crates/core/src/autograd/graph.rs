use crate::autograd::kernels;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Sum,
    Transpose,
    Reshape,
    Softmax,
    LayerNorm,
    Gelu,
    CrossEntropy,
    Gather,
    SliceCols,
    ConcatCols,
    ConcatRows,
    GradGate,
}

/// Deliberately corrupts the backward rule of one primitive kind by scaling
/// the adjoint it propagates. Only used to prove that verification catches
/// a mis-registered backward.
#[derive(Debug, Clone, Copy)]
pub struct BackwardFault {
    pub kind: OpKind,
    pub scale: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    CrossEntropy { logits: Var, labels: Tensor<T>, probs: Vec<T> },
    Gather { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GradGate { x: Var, open: bool },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Gather { .. } => OpKind::Gather,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::GradGate { .. } => OpKind::GradGate,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of executed primitives. Nodes are appended in execution order, so
/// the tape is topologically sorted by construction and a reverse sweep
/// visits every node once.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf; `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: format!("{:?}", op.kind()) });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    /// Matrix product over the last two dimensions. Leading dimensions must
    /// agree, or `b` may be a plain matrix shared across `a`'s batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Dimension { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if k != k2 || (!shared_b && lead_a != lead_b) {
            return Err(err());
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                kernels::matmul_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Matmul { a, b, batch, m, k, n, shared_b },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_values(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_values(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_values(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, &[a, b])
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading dimensions.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::Dimension { op: "add_row", lhs: sx, rhs: sb });
        }
        let n = sb[0];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        self.push(Tensor::from_parts(sx, data), Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Dimension { op: "transpose", lhs: sx, rhs: vec![] });
        }
        let (rows, cols) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let batch = sx.iter().product::<usize>() / (rows * cols);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..batch {
            let off = bi * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[off + c * rows + r] = src[off + r * cols + c];
                }
            }
        }
        let mut shape = sx;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        self.push(Tensor::from_parts(shape, out), Op::Transpose { x, batch, rows, cols }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::NonFinite { op: "Softmax input".into() });
        }
        let (rows, cols) = row_split(src.shape());
        let mut out = vec![T::zero(); src.numel()];
        for r in 0..rows {
            kernels::softmax_slice(
                &src.data()[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let shape = src.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, &[x])
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance
    /// (biased estimator) and applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (rows, _) = row_split(&sx);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let slice = &src[r * d..(r + 1) * d];
            let mean = slice.iter().copied().sum::<T>() * inv_d;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (slice[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * kernels::normal_cdf(v));
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// Mean over rows of `-Σ_c labels · log_softmax(logits)`. `labels` holds
    /// one probability distribution per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || labels.shape() != sl.as_slice() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: sl,
                rhs: labels.shape().to_vec(),
            });
        }
        let (rows, cols) = (sl[0], sl[1]);
        let tol = T::from_f64_lossy(1e-9).max(T::epsilon() * T::from_f64_lossy(16.0));
        for r in 0..rows {
            let row = &labels.data()[r * cols..(r + 1) * cols];
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&v| v < T::zero() || !v.is_finite()) || (total - T::one()).abs() > tol {
                return Err(Error::validation(format!(
                    "cross_entropy: label row {r} is not a probability distribution (sum {total})"
                )));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for c in 0..cols {
                let y = labels.data()[r * cols + c];
                probs[r * cols + c] = (x[c] - lse).exp();
                if y != T::zero() {
                    loss = loss - y * (x[c] - lse);
                }
            }
        }
        loss = loss / T::from_usize(rows).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.clone(), probs },
            &[logits],
        )
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Backward scatters.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let numel: usize = shape.iter().product();
        if numel != index.len() || index.iter().any(|&i| i >= src.len()) {
            return Err(Error::Dimension {
                op: "gather",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { x, index }, &[x])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || len == 0 || start + len > sx[1] {
            return Err(Error::Dimension { op: "slice_cols", lhs: sx, rhs: vec![start, len] });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols { x, start }, &[x])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.concat_check("concat_cols", parts, 0)?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols { parts: parts.to_vec() },
            parts,
        )
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.concat_check("concat_rows", parts, 1)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.shape(p)[0];
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows { parts: parts.to_vec() },
            parts,
        )
    }

    fn concat_check(&self, op: &'static str, parts: &[Var], keep: usize) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract(format!("{op} of zero tensors")))?;
        let s0 = self.shape(*first).to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s0.len() != 2 || s[keep] != s0[keep] {
                return Err(Error::Dimension { op, lhs: s0, rhs: s.to_vec() });
            }
        }
        Ok(s0[keep])
    }

    /// Forward identity; the backward pass lets the adjoint through only
    /// when `open`.
    pub fn grad_gate(&mut self, x: Var, open: bool) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::GradGate { x, open }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(mut g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Some(fault) = self.fault {
                if fault.kind == self.nodes[id].op.kind() {
                    let s = T::from_f64_lossy(fault.scale);
                    g.iter_mut().for_each(|v| *v = *v * s);
                }
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    let node = &mut self.nodes[id];
                    match &mut node.grad {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                                *a = *a + *v;
                            }
                        }
                        None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                    }
                }
                Op::Matmul { a, b, batch, m, k, n, shared_b } => {
                    let (a, b, batch, m, k, n, shared_b) = (*a, *b, *batch, *m, *k, *n, *shared_b);
                    if self.nodes[a.0].requires_grad {
                        let bv = self.value(b).data();
                        let mut da = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            let boff = if shared_b { 0 } else { bi * k * n };
                            kernels::matmul_bt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[boff..boff + k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        accumulate(&mut adj, a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = self.value(a).data();
                        let mut db = vec![T::zero(); self.value(b).numel()];
                        for bi in 0..batch {
                            let boff = if shared_b { 0 } else { bi * k * n };
                            kernels::matmul_at_acc(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[boff..boff + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        accumulate(&mut adj, b, db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.send(&mut adj, b, || g.clone());
                    self.send(&mut adj, a, || g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.send(&mut adj, b, || g.iter().map(|&v| -v).collect());
                    self.send(&mut adj, a, || g);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    let da: Vec<T> = g.iter().zip(bv).map(|(&u, &v)| u * v).collect();
                    let db: Vec<T> = g.iter().zip(av).map(|(&u, &v)| u * v).collect();
                    self.send(&mut adj, a, || da);
                    self.send(&mut adj, b, || db);
                }
                Op::AddRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let n = self.value(bias).numel();
                    let mut db = vec![T::zero(); n];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % n] = db[i % n] + v;
                    }
                    self.send(&mut adj, bias, || db);
                    self.send(&mut adj, x, || g);
                }
                Op::Scale { x, factor } => {
                    let (x, f) = (*x, *factor);
                    self.send(&mut adj, x, || g.iter().map(|&v| v * f).collect());
                }
                Op::Sum { x } => {
                    let x = *x;
                    let n = self.value(x).numel();
                    self.send(&mut adj, x, || vec![g[0]; n]);
                }
                Op::Transpose { x, batch, rows, cols } => {
                    let (x, batch, rows, cols) = (*x, *batch, *rows, *cols);
                    // g has shape [.., cols, rows]
                    let mut dx = vec![T::zero(); g.len()];
                    for bi in 0..batch {
                        let off = bi * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[off + r * cols + c] = g[off + c * rows + r];
                            }
                        }
                    }
                    self.send(&mut adj, x, || dx);
                }
                Op::Reshape { x } => {
                    let x = *x;
                    self.send(&mut adj, x, || g);
                }
                Op::Softmax { x } => {
                    let x = *x;
                    let y = node.value.data();
                    let (rows, cols) = row_split(node.value.shape());
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                    self.send(&mut adj, x, || dx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let d = self.value(gamma).numel();
                    let gv = self.value(gamma).data();
                    let rows = rstd.len();
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gs = &g[r * d..(r + 1) * d];
                        let hs = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + gs[j] * hs[j];
                            dbeta[j] = dbeta[j] + gs[j];
                            let dh = gs[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hs[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = gs[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hs[j] * mean_dh_h);
                        }
                    }
                    self.send(&mut adj, gamma, || dgamma);
                    self.send(&mut adj, beta, || dbeta);
                    self.send(&mut adj, x, || dx);
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let dx = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &u)| u * (kernels::normal_cdf(v) + v * kernels::normal_pdf(v)))
                        .collect();
                    self.send(&mut adj, x, || dx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let rows = labels.shape()[0];
                    let scale = g[0] / T::from_usize(rows).unwrap();
                    let dx = probs
                        .iter()
                        .zip(labels.data())
                        .map(|(&p, &y)| (p - y) * scale)
                        .collect();
                    self.send(&mut adj, logits, || dx);
                }
                Op::Gather { x, index } => {
                    let x = *x;
                    let mut dx = vec![T::zero(); self.value(x).numel()];
                    for (&i, &v) in index.iter().zip(&g) {
                        dx[i] = dx[i] + v;
                    }
                    self.send(&mut adj, x, || dx);
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let sx = self.shape(x);
                    let (rows, cols) = (sx[0], sx[1]);
                    let len = g.len() / rows;
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.send(&mut adj, x, || dx);
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(p)[1];
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        self.send(&mut adj, p, || dp);
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(p).numel();
                        let dp = g[offset..offset + n].to_vec();
                        offset += n;
                        self.send(&mut adj, p, || dp);
                    }
                }
                Op::GradGate { x, open } => {
                    let (x, open) = (*x, *open);
                    if open {
                        self.send(&mut adj, x, || g);
                    }
                }
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], target: Var, contribution: impl FnOnce() -> Vec<T>) {
        if self.nodes[target.0].requires_grad {
            accumulate(adj, target, contribution());
        }
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Vec<T>>], target: Var, contribution: Vec<T>) {
    match &mut adj[target.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&contribution) {
                *a = *a + *v;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
