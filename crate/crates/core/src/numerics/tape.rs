//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to compute its vector-Jacobian product. Nodes are only ever appended,
//! so creation order is a valid topological order and `backward` is a single
//! reverse sweep.

use rand::Rng;

use super::exact_sum::ExactSum;
use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive logit applied to padded keys before the softmax.
pub const PAD_LOGIT: f64 = -1e9;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused multi-head attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl AttentionShape {
    pub fn width(&self) -> usize {
        self.heads * self.key_dim
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        pad: Vec<bool>,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        rows: Vec<Option<usize>>,
    },
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanPool {
        x: Var,
        len: usize,
        pad: Vec<bool>,
        counts: Vec<usize>,
    },
    BceWithLogits(Var, Vec<f64>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Single-writer computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros when nothing flowed into `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Matrix product. `a` may carry leading batch axes which are flattened
    /// into rows: `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
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
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    /// `x[.., d] + bias[d]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(out, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        self.push(out, &[x], Op::Scale(x, c))
    }

    /// Elementwise product with a constant tensor (dropout masks, weights).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim(format!(
                "mul_const: mask of length {} for tensor {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(out, &[x], Op::MulConst(x, mask)))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, &[x], Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::ln);
        self.push(out, &[x], Op::Ln(x))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xs[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xs[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, &[x], Op::Softmax { x, outer, n, inner }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if !v.all_finite() {
            return Err(Error::Numeric("log_softmax: non-finite input".into()));
        }
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|a| a - lse));
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(out, &[x], Op::LogSoftmax(x)))
    }

    /// Layer normalisation over the last axis followed by `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm: eps must be positive"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Fused scaled dot-product attention over already-projected heads.
    ///
    /// `q`, `k`, `v` hold `batch * len` rows of `heads * key_dim` columns.
    /// Keys flagged in `pad` get [`PAD_LOGIT`] added before the softmax and
    /// padded query rows produce zeros. Reductions over keys use exact
    /// summation so the result is independent of key order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, pad: &[bool]) -> Result<Var> {
        if shape.heads < 1 || shape.key_dim < 1 {
            return Err(Error::config("attention needs at least one head and key_dim >= 1"));
        }
        let rows = shape.batch * shape.len;
        let w = shape.width();
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if self.value(t).numel() != rows * w || self.value(t).cols() != w {
                return Err(Error::dim(format!(
                    "attention: {name} has shape {:?}, expected {rows} rows of width {w}",
                    self.shape(t)
                )));
            }
        }
        if pad.len() != rows {
            return Err(Error::dim(format!(
                "attention: pad mask has {} entries for {rows} positions",
                pad.len()
            )));
        }
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let l = shape.len;
        let kd = shape.key_dim;
        let scale = 1.0 / (kd as f64).sqrt();
        let mut probs = vec![0.0; shape.batch * shape.heads * l * l];
        let mut out = vec![0.0; rows * w];
        let mut acc = ExactSum::new();
        let mut logits = vec![0.0; l];
        for b in 0..shape.batch {
            for h in 0..shape.heads {
                let off = h * kd;
                for i in 0..l {
                    let qi = b * l + i;
                    if pad[qi] {
                        continue;
                    }
                    let qrow = &qs[qi * w + off..qi * w + off + kd];
                    for (j, logit) in logits.iter_mut().enumerate() {
                        let kj = b * l + j;
                        let krow = &ks[kj * w + off..kj * w + off + kd];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum();
                        *logit = dot * scale + if pad[kj] { PAD_LOGIT } else { 0.0 };
                    }
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let p = &mut probs[((b * shape.heads + h) * l + i) * l..][..l];
                    acc.clear();
                    for j in 0..l {
                        p[j] = (logits[j] - m).exp();
                        acc.add(p[j]);
                    }
                    let s = acc.value();
                    for pj in p.iter_mut() {
                        *pj /= s;
                    }
                    for dd in 0..kd {
                        acc.clear();
                        for (j, pj) in p.iter().enumerate() {
                            if *pj != 0.0 {
                                acc.add(pj * vs[(b * l + j) * w + off + dd]);
                            }
                        }
                        out[qi * w + off + dd] = acc.value();
                    }
                }
            }
        }
        let out = Tensor::from_parts(self.shape(q).to_vec(), out);
        Ok(self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                shape,
                pad: pad.to_vec(),
                probs,
            },
        ))
    }

    /// Row lookup into `table[vocab, d]`. Token `t >= 1` selects row `t - 1`;
    /// token 0 is padding and embeds to zeros.
    pub fn embedding(&mut self, table: Var, tokens: &[u32], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::dim(format!("embedding: table must be 2-D, got {ts:?}")));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if out_shape.iter().product::<usize>() != tokens.len() {
            return Err(Error::dim(format!(
                "embedding: {} tokens cannot take shape {out_shape:?}",
                tokens.len()
            )));
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t == 0 {
                rows.push(None);
            } else if (t as usize) <= vocab {
                rows.push(Some(t as usize - 1));
            } else {
                return Err(Error::Vocab(format!("token {t} outside vocabulary of {vocab}")));
            }
        }
        let tab = self.value(table).data();
        let mut data = vec![0.0; tokens.len() * d];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                data[i * d..(i + 1) * d].copy_from_slice(&tab[r * d..(r + 1) * d]);
            }
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, &[table], Op::Embedding { table, rows }))
    }

    /// Selects rows of `x` (leading axes flattened) -> `[rows.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(format!("gather_rows: row {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(out, &[x], Op::GatherRows(x, rows.to_vec())))
    }

    /// `out[i] = x[i, cols[i]]` for a 2-D view of `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if cols.len() != n {
            return Err(Error::dim(format!("pick: {} indices for {n} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::dim(format!("pick: column {bad} out of {d}")));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| v.data()[i * d + c]).collect();
        let out = Tensor::from_parts(vec![n], data);
        Ok(self.push(out, &[x], Op::Pick(x, cols.to_vec())))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..va.rows() {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, &[a, b], Op::Concat(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean over the `len` positions of each batch row of `x[batch*len, d]`,
    /// skipping padded positions. Rows with no valid position pool to zeros.
    pub fn mean_pool(&mut self, x: Var, len: usize, pad: &[bool]) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        let n = v.rows();
        if len == 0 || !n.is_multiple_of(len) || pad.len() != n {
            return Err(Error::dim(format!(
                "mean_pool: {n} rows, len {len}, pad mask of {}",
                pad.len()
            )));
        }
        let batch = n / len;
        let mut counts = vec![0usize; batch];
        let mut data = vec![0.0; batch * d];
        for b in 0..batch {
            let out = &mut data[b * d..(b + 1) * d];
            for i in 0..len {
                let r = b * len + i;
                if pad[r] {
                    continue;
                }
                counts[b] += 1;
                for (o, val) in out.iter_mut().zip(v.row(r)) {
                    *o += val;
                }
            }
            if counts[b] > 0 {
                let c = counts[b] as f64;
                out.iter_mut().for_each(|o| *o /= c);
            }
        }
        let out = Tensor::from_parts(vec![batch, d], data);
        Ok(self.push(
            out,
            &[x],
            Op::MeanPool {
                x,
                len,
                pad: pad.to_vec(),
                counts,
            },
        ))
    }

    /// Mean binary cross-entropy of logits `z` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(z);
        if v.numel() != targets.len() || targets.is_empty() {
            return Err(Error::dim(format!(
                "bce_with_logits: {} logits for {} targets",
                v.numel(),
                targets.len()
            )));
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(s / targets.len() as f64);
        Ok(self.push(out, &[z], Op::BceWithLogits(z, targets.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every node
    /// that requires one. Gradients from earlier calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {}", lv.item())));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            propagate(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffer of `v`, allocated on first touch; `None` if `v` is constant.
fn slot(nodes: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn propagate(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let sb = nodes[b.0].value.shape().to_vec();
            let (k, n) = (sb[0], sb[1]);
            let m = nodes[a.0].value.numel() / k;
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                let ga = slot(nodes, *a).unwrap();
                gemm(m, n, k, g, false, &bv, true, ga, true);
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                let gb = slot(nodes, *b).unwrap();
                gemm(k, m, n, &av, true, g, false, gb, true);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(ga) = slot(nodes, *v) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            if let Some(ga) = slot(nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, *b) {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = slot(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = slot(nodes, *bias) {
                let d = gb.len();
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::MulConst(x, mask) => {
            if let Some(gx) = slot(nodes, *x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = slot(nodes, *x) {
                for i in 0..gx.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, *x) {
                let y = out.data();
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Ln(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            if let Some(gx) = slot(nodes, *x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
        }
        Op::Softmax { x, outer, n, inner } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            if let Some(gx) = slot(nodes, *x) {
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = slot(nodes, *x) {
                let c = out.cols();
                for (r, (gr, yr)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[r * c + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = out.cols();
            let gv = nodes[gain.0].value.data().to_vec();
            if let Some(gg) = slot(nodes, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, *bias) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = slot(nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            pad,
            probs,
        } => attention_backward(nodes, *q, *k, *v, shape, pad, probs, g),
        Op::Embedding { table, rows } => {
            if let Some(gt) = slot(nodes, *table) {
                let d = out.cols();
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        for j in 0..d {
                            gt[r * d + j] += g[i * d + j];
                        }
                    }
                }
            }
        }
        Op::GatherRows(x, rows) => {
            if let Some(gx) = slot(nodes, *x) {
                let d = out.cols();
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[i * d + j];
                    }
                }
            }
        }
        Op::Pick(x, cols) => {
            let d = nodes[x.0].value.cols();
            if let Some(gx) = slot(nodes, *x) {
                for (i, &c) in cols.iter().enumerate() {
                    gx[i * d + c] += g[i];
                }
            }
        }
        Op::Concat(a, b) => {
            let ca = nodes[a.0].value.cols();
            let cb = nodes[b.0].value.cols();
            let c = ca + cb;
            if let Some(ga) = slot(nodes, *a) {
                for (r, gr) in g.chunks(c).enumerate() {
                    for j in 0..ca {
                        ga[r * ca + j] += gr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, *b) {
                for (r, gr) in g.chunks(c).enumerate() {
                    for j in 0..cb {
                        gb[r * cb + j] += gr[ca + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += s);
            }
        }
        Op::MeanPool { x, len, pad, counts } => {
            if let Some(gx) = slot(nodes, *x) {
                let d = out.cols();
                for (b, &c) in counts.iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    for i in 0..*len {
                        let r = b * len + i;
                        if pad[r] {
                            continue;
                        }
                        for j in 0..d {
                            gx[r * d + j] += g[b * d + j] / c as f64;
                        }
                    }
                }
            }
        }
        Op::BceWithLogits(z, targets) => {
            let zv = nodes[z.0].value.data().to_vec();
            if let Some(gz) = slot(nodes, *z) {
                let n = targets.len() as f64;
                for i in 0..gz.len() {
                    gz[i] += g[0] * (sigmoid(zv[i]) - targets[i]) / n;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &mut [Node],
    q: Var,
    k: Var,
    v: Var,
    shape: &AttentionShape,
    pad: &[bool],
    probs: &[f64],
    g: &[f64],
) {
    let (l, kd, w) = (shape.len, shape.key_dim, shape.width());
    let scale = 1.0 / (kd as f64).sqrt();
    let qs = nodes[q.0].value.data().to_vec();
    let ks = nodes[k.0].value.data().to_vec();
    let vs = nodes[v.0].value.data().to_vec();
    let mut dq = vec![0.0; qs.len()];
    let mut dk = vec![0.0; ks.len()];
    let mut dv = vec![0.0; vs.len()];
    let mut dp = vec![0.0; l];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let off = h * kd;
            for i in 0..l {
                let qi = b * l + i;
                if pad[qi] {
                    continue;
                }
                let p = &probs[((b * shape.heads + h) * l + i) * l..][..l];
                let gi = &g[qi * w + off..qi * w + off + kd];
                for j in 0..l {
                    let kj = b * l + j;
                    let vrow = &vs[kj * w + off..kj * w + off + kd];
                    dp[j] = gi.iter().zip(vrow).map(|(a, c)| a * c).sum();
                    if p[j] != 0.0 {
                        for dd in 0..kd {
                            dv[kj * w + off + dd] += p[j] * gi[dd];
                        }
                    }
                }
                let pdp: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                for j in 0..l {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = b * l + j;
                    for dd in 0..kd {
                        dq[qi * w + off + dd] += ds * ks[kj * w + off + dd];
                        dk[kj * w + off + dd] += ds * qs[qi * w + off + dd];
                    }
                }
            }
        }
    }
    for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gs) = slot(nodes, var) {
            gs.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
        }
    }
}
