use rand::Rng;

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f32 },
    Sum { a: Var },
    MeanRows { a: Var },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<u32> },
    SliceRows { a: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
    Mse { pred: Var, targets: Vec<f32> },
    Dropout { a: Var, mask: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the computation graph and `backward` visits every
/// node at most once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into the tensor's grad slot.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

// 1 + tanh(u) = 2σ(2u); the logistic form avoids cancelling against −1 in
// the negative tail.
fn gelu_sigmoids(x: f32) -> (f32, f32) {
    let u = GELU_C * (x + GELU_K * x * x * x);
    (1.0 / (1.0 + (-2.0 * u).exp()), 1.0 / (1.0 + (2.0 * u).exp()))
}

fn gelu(x: f32) -> f32 {
    x * gelu_sigmoids(x).0
}

fn gelu_grad(x: f32) -> f32 {
    let (s, s_neg) = gelu_sigmoids(x);
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    s + 2.0 * x * s * s_neg * du
}

/// Row-wise softmax with max subtraction; the normalizer is summed in f64.
fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    out.iter_mut().for_each(|o| *o *= inv);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix(ta, "matmul")?;
        let (k2, n) = matrix(tb, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`. Linear layers store weights as
    /// `out × in`, so this is the projection used throughout the model.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix(ta, "matmul_nt")?;
        let (n, k2) = matrix(tb, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(tb.len()) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddRow { a, bias }, &[a, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Scale { a, factor }, &[a]))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let value = Tensor::new(vec![1], vec![s as f32])?;
        Ok(self.push(value, Op::Sum { a }, &[a]))
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut acc = vec![0.0f64; n];
        for row in ta.data().chunks_exact(n) {
            acc.iter_mut().zip(row).for_each(|(s, &x)| *s += x as f64);
        }
        let out = acc.into_iter().map(|s| (s / m as f64) as f32).collect();
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::MeanRows { a }, &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Gelu { a }, &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_row(x, o);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows { a }, &[a]))
    }

    /// Per-row normalization to zero mean, unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = inv as f32;
            for c in 0..n {
                let h = ((row[c] as f64 - mean) * inv) as f32;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = matrix(tt, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding of an empty id sequence".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, n) = matrix(ta, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: rows,
            });
        }
        let out = ta.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], out)?;
        Ok(self.push(value, Op::SliceRows { a, start }, &[a]))
    }

    /// Multi-head causal self-attention over `t×d` query/key/value matrices.
    /// Position `i` attends to positions `0..=i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = matrix(tq, "causal_attention")?;
        if tk.shape() != tq.shape() {
            return Err(mismatch("causal_attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(mismatch("causal_attention", tq, tv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0f32; heads * t * t];
        let mut out = vec![0.0f32; t * d];
        let mut scores = vec![0.0f32; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    scores[j] = scale * dot(qi, &kd[j * d + off..j * d + off + dh]);
                }
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                softmax_row(&scores[..=i], p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &vd[j * d + off..j * d + off + dh], oi);
                }
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean next-token cross-entropy: `(1/t)·Σᵢ −log softmax(logitsᵢ)[targetᵢ]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vocab) = matrix(tl, "cross_entropy")?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id as usize >= vocab) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad as usize,
                extent: vocab,
            });
        }
        let mut probs = vec![0.0f32; t * vocab];
        let mut total = 0.0f64;
        for (r, &target) in targets.iter().enumerate() {
            let row = tl.row(r);
            softmax_row(row, &mut probs[r * vocab..(r + 1) * vocab]);
            total -= log_softmax_at(row, target as usize);
        }
        let loss = (total / t as f64) as f32;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, pred: Var, targets: &[f32]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: tp.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| (p as f64 - y as f64).powi(2))
            .sum();
        let value = Tensor::new(vec![1], vec![(s / targets.len() as f64) as f32])?;
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
            &[pred],
        ))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale
    /// survivors by `1/(1-p)`. `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let mask: Vec<f32> = (0..ta.len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { a, mask }, &[a]))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that depends on a [`Tape::param`] leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut [f32]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn apply_rule(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                if let Some(da) = self.grad_slot(grads, *a) {
                    matmul_nt(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    matmul_tn(ta.data(), g, db, k, m, n);
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if let Some(da) = self.grad_slot(grads, *a) {
                    matmul_nn(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    matmul_tn(g, ta.data(), db, n, m, k);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.grad_slot(grads, *v) {
                        axpy(1.0, g, d);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        axpy(1.0, row, db);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    axpy(*factor, g, da);
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanRows { a } => {
                let rows = self.value(*a).rows() as f32;
                if let Some(da) = self.grad_slot(grads, *a) {
                    let n = g.len();
                    for row in da.chunks_exact_mut(n) {
                        axpy(1.0 / rows, g, row);
                    }
                }
            }
            Op::Gelu { a } => {
                let ta = self.value(*a);
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &x) in da.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * gelu_grad(x);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((dr, gr), yr) in da
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let s: f32 = dot(gr, yr);
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gain_v = self.value(*gain).data();
                if let Some(dg) = self.grad_slot(grads, *gain) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, &gi), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * h;
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for gr in g.chunks_exact(n) {
                        axpy(1.0, gr, db);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0f32; n];
                    for (r, (gr, hr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_d = 0.0f64;
                        let mut mean_dh = 0.0f64;
                        for c in 0..n {
                            dxhat[c] = gr[c] * gain_v[c];
                            mean_d += dxhat[c] as f64;
                            mean_dh += (dxhat[c] * hr[c]) as f64;
                        }
                        let (mean_d, mean_dh) = ((mean_d / n as f64) as f32, (mean_dh / n as f64) as f32);
                        let out = &mut dx[r * n..(r + 1) * n];
                        for c in 0..n {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.grad_slot(grads, *table) {
                    let d = g.len() / ids.len();
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        axpy(1.0, &g[i * d..(i + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let n = node.value.cols();
                if let Some(da) = self.grad_slot(grads, *a) {
                    axpy(1.0, g, &mut da[start * n..start * n + g.len()]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(node, g, grads, (*q, *k, *v), *heads, probs),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let t = targets.len();
                let vocab = probs.len() / t;
                let scale = g[0] / t as f32;
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    for (r, &target) in targets.iter().enumerate() {
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        axpy(scale, &probs[r * vocab..(r + 1) * vocab], row);
                        row[target as usize] -= scale;
                    }
                }
            }
            Op::Mse { pred, targets } => {
                let tp = self.value(*pred);
                let scale = 2.0 * g[0] / targets.len() as f32;
                if let Some(dp) = self.grad_slot(grads, *pred) {
                    for ((d, &p), &y) in dp.iter_mut().zip(tp.data()).zip(targets) {
                        *d += scale * (p - y);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[f32],
    ) {
        let (t, d) = (node.value.shape()[0], node.value.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0f32; t * d];
        let mut dk = vec![0.0f32; t * d];
        let mut dv = vec![0.0f32; t * d];
        let mut dp = vec![0.0f32; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let gi = &g[i * d + off..i * d + off + dh];
                let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                let mut s = 0.0f32;
                for j in 0..=i {
                    dp[j] = dot(gi, &vd[j * d + off..j * d + off + dh]);
                    s += p[j] * dp[j];
                    axpy(p[j], gi, &mut dv[j * d + off..j * d + off + dh]);
                }
                for j in 0..=i {
                    let ds = scale * p[j] * (dp[j] - s);
                    if ds != 0.0 {
                        axpy(ds, &kd[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                        axpy(ds, &qd[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                axpy(1.0, &delta, slot);
            }
        }
    }
}

/// `log softmax(row)[target]`, evaluated in f64.
pub(crate) fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row[target] as f64 - max - lse
}
