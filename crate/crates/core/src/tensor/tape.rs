//! Reverse-mode autodiff on a linear tape.
//!
//! Ops record their inputs by node index during the forward pass; `backward`
//! replays the tape in reverse. Ops only ever reference earlier nodes, so
//! insertion order is already a topological order. All kernels are
//! sequential with a fixed summation order: identical inputs produce
//! bit-identical outputs and gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable unary op. Escape hatch for tests and
/// extensions; `backward` returns dL/dx given dL/dy.
pub trait CustomOp<E: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, x: &Tensor<E>) -> Tensor<E>;
    fn backward(&self, x: &Tensor<E>, y: &Tensor<E>, grad_y: &[E]) -> Vec<E>;
}

enum Op<E: Scalar> {
    Leaf,
    Add(Var, Var),
    /// Broadcast add of a `[d]` row over the last axis of `x`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: E,
        hi: E,
    },
    Minimum(Var, Var),
    Maximum(Var, Var),
    MaskedSoftmax {
        scores: Var,
        key_mask: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Per-row (mean, inv_std) from the forward pass.
        cache: Vec<(E, E)>,
    },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropyLogits {
        logits: Var,
        targets: Vec<i64>,
        ignore_index: i64,
        /// Row-major softmax probabilities cached at forward time.
        probs: Vec<E>,
        counted: usize,
    },
    BinaryCrossEntropy {
        probs: Var,
        labels: Vec<E>,
        mask: Vec<bool>,
        counted: usize,
    },
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: E,
    },
    Custom {
        x: Var,
        op: Box<dyn CustomOp<E>>,
    },
}

/// Recording tape. One tape per forward/backward pass.
pub struct Tape<E: Scalar> {
    values: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    backward_done: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    /// Gradient of `v` after `backward`, if the node required one.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.values[v.0].grad()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<E>> {
        let t = &self.values[v.0];
        t.grad().map(|g| Tensor::new(t.shape().to_vec(), g.to_vec()).expect("grad shape matches"))
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.values.push(value.with_requires_grad(requires_grad));
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.values[v.0].requires_grad()
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Var {
        let req = tensor.requires_grad();
        self.push(tensor, Op::Leaf, req)
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor<E>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    // ── pointwise and broadcast ops ─────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<E> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    /// `x[.., d] + row[d]`, broadcasting the row over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = *tx.shape().last().ok_or_else(|| shape_err("add_row", "rank-0 input".into()))?;
        if tr.shape() != [d] {
            return Err(shape_err("add_row", format!("row {:?} vs last dim {}", tr.shape(), d)));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tr.data()[i % d];
        }
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x) || self.requires(row);
        Ok(self.push(out, Op::AddRow(x, row), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<E> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub(a, b), req))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<E> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), req))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("div", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<E> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x / y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Div(a, b), req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let tx = self.value(x);
        let data: Vec<E> = tx.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        self.push(out, Op::Scale(x, c), req)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let tx = self.value(x);
        let data: Vec<E> = tx.data().iter().map(|&v| v + c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        self.push(out, Op::AddScalar(x), req)
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", tx.shape(), shape)));
        }
        let out = Tensor::new(shape.to_vec(), tx.data().to_vec()).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::Reshape(x), req))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                detail: format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            });
        }
        let (out_shape, out_data) = permute_data(tx.data(), tx.shape(), axes);
        let out = Tensor::new(out_shape, out_data).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, req))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: format!("axis {} out of range for rank {}", axis, first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", s, first, axis)));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![E::zero(); out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let tp = self.value(p);
            let len_p = tp.shape()[axis] * inner;
            for o in 0..outer {
                let src = &tp.data()[o * len_p..(o + 1) * len_p];
                data[o * row_out + offset..o * row_out + offset + len_p].copy_from_slice(src);
            }
            offset += len_p;
        }
        let out = Tensor::new(out_shape, data).unwrap();
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, req))
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "split",
                detail: format!("axis {} out of range for rank {}", axis, shape.len()),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.iter().any(|&s| s == 0) {
            return Err(shape_err(
                "split",
                format!("sizes {:?} do not partition axis {} of {:?}", sizes, axis, shape),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &len in sizes {
            out.push(self.slice_axis(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![E::zero(); out_shape.iter().product()];
        let row_in = shape[axis] * inner;
        let row_out = len * inner;
        for o in 0..outer {
            let src = &tx.data()[o * row_in + start * inner..o * row_in + (start + len) * inner];
            data[o * row_out..(o + 1) * row_out].copy_from_slice(src);
        }
        let out = Tensor::new(out_shape, data).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, req))
    }

    /// Gathers rows of `x` (first axis) at `ids`, with gradient scatter-add.
    /// `embedding_lookup(table, ids)` is this op applied to a table.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(shape_err("gather_rows", "rank-0 input".into()));
        }
        let rows = tx.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                detail: format!("index {} out of range for {} rows", bad, rows),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument { op: "gather_rows", detail: "empty index list".into() });
        }
        let inner: usize = tx.shape()[1..].iter().product();
        let mut out_shape = tx.shape().to_vec();
        out_shape[0] = ids.len();
        let mut data = vec![E::zero(); ids.len() * inner];
        for (o, &id) in ids.iter().enumerate() {
            data[o * inner..(o + 1) * inner].copy_from_slice(&tx.data()[id * inner..(id + 1) * inner]);
        }
        let out = Tensor::new(out_shape, data).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::GatherRows { x, ids: ids.to_vec() }, req))
    }

    /// Alias of [`Tape::gather_rows`] for embedding tables.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(table, ids)
    }

    // ── activations and clamps ──────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data: Vec<E> = tx.data().iter().map(|&v| v.maximum(E::zero())).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        self.push(out, Op::Relu(x), req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let one = E::one();
        let data: Vec<E> = tx.data().iter().map(|&v| one / (one + (-v).exp())).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        self.push(out, Op::Sigmoid(x), req)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo < hi) {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                detail: format!("lo {} must be < hi {}", lo, hi),
            });
        }
        let (lo, hi) = (E::from_f64(lo), E::from_f64(hi));
        let tx = self.value(x);
        let data: Vec<E> = tx.data().iter().map(|&v| v.maximum(lo).minimum(hi)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::Clamp { x, lo, hi }, req))
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("minimum", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<E> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x.minimum(y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Minimum(a, b), req))
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("maximum", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<E> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x.maximum(y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Maximum(a, b), req))
    }

    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {} outside [0,1)", rate),
            });
        }
        if rate == 0.0 {
            // Identity; keep the graph small.
            return Ok(self.scale(x, 1.0));
        }
        let tx = self.value(x);
        let keep: Vec<bool> = (0..tx.numel()).map(|_| rng.gen::<f64>() >= rate).collect();
        let scale = E::from_f64(1.0 / (1.0 - rate));
        let data: Vec<E> = tx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { E::zero() })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        Ok(self.push(out, Op::Dropout { x, keep, scale }, req))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product `a[.., p, q] × b[.., q, r]`. Leading batch
    /// dimensions must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a[.., p, q] × b[.., r, q]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("{:?} vs {:?}", sa, sb)));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bq, r) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if q != bq {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {:?} vs {:?} (transpose_b={})", sa, sb, transpose_b),
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[p, r]);
        let mut data = vec![E::zero(); batch * p * r];
        for bi in 0..batch {
            let av = &ta.data()[bi * p * q..(bi + 1) * p * q];
            let bv = &tb.data()[bi * q * r..(bi + 1) * q * r];
            let cv = &mut data[bi * p * r..(bi + 1) * p * r];
            if transpose_b {
                matmul_nt_kernel(av, bv, cv, p, q, r);
            } else {
                matmul_nn_kernel(av, bv, cv, p, q, r);
            }
        }
        let out = Tensor::new(out_shape, data).unwrap();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMul { a, b, transpose_b }, req))
    }

    // ── normalization and softmax ───────────────────────────────────────

    /// Softmax over the last axis with a shared key mask. Masked keys get
    /// exactly zero weight; every row is normalized over the unmasked keys.
    pub fn masked_softmax(&mut self, scores: Var, key_mask: &[bool]) -> Result<Var, TensorError> {
        let ts = self.value(scores);
        let k = *ts
            .shape()
            .last()
            .ok_or_else(|| shape_err("masked_softmax", "rank-0 input".into()))?;
        if key_mask.len() != k {
            return Err(shape_err(
                "masked_softmax",
                format!("mask length {} vs key dim {}", key_mask.len(), k),
            ));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(TensorError::DegenerateMask {
                op: "masked_softmax",
                detail: "all keys masked out".into(),
            });
        }
        let rows = ts.numel() / k;
        let mut data = vec![E::zero(); ts.numel()];
        for row in 0..rows {
            let src = &ts.data()[row * k..(row + 1) * k];
            let dst = &mut data[row * k..(row + 1) * k];
            softmax_row_masked(src, key_mask, dst);
        }
        let out = Tensor::new(ts.shape().to_vec(), data).unwrap();
        let req = self.requires(scores);
        Ok(self.push(out, Op::MaskedSoftmax { scores, key_mask: key_mask.to_vec() }, req))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        if d < 2 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                detail: format!("last dim must be >= 2, got {}", d),
            });
        }
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs last dim {}", tg.shape(), tb.shape(), d),
            ));
        }
        let rows = tx.numel() / d;
        let mut data = vec![E::zero(); tx.numel()];
        let mut cache = Vec::with_capacity(rows);
        let inv_d = E::from_f64(1.0 / d as f64);
        let eps_e = E::from_f64(eps);
        for row in 0..rows {
            let src = &tx.data()[row * d..(row + 1) * d];
            let mut mean = E::zero();
            for &v in src {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = E::zero();
            for &v in src {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = E::one() / (var + eps_e).sqrt();
            cache.push((mean, inv_std));
            let dst = &mut data[row * d..(row + 1) * d];
            for j in 0..d {
                dst[j] = (src[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }, req))
    }

    // ── reductions and losses ───────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut s = E::zero();
        for &v in tx.data() {
            s += v;
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut s = E::zero();
        for &v in tx.data() {
            s += v;
        }
        let mean = s * E::from_f64(1.0 / tx.numel() as f64);
        let req = self.requires(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), req)
    }

    /// Mean cross entropy of `logits[n, v]` against integer targets,
    /// skipping positions equal to `ignore_index`.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.rank() != 2 {
            return Err(shape_err("cross_entropy_from_logits", format!("expected [n, v], got {:?}", tl.shape())));
        }
        let (n, v) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != n {
            return Err(shape_err(
                "cross_entropy_from_logits",
                format!("{} targets vs {} rows", targets.len(), n),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && (t < 0 || t as usize >= v)) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_from_logits",
                detail: format!("target {} out of range 0..{}", bad, v),
            });
        }
        let counted = targets.iter().filter(|&&t| t != ignore_index).count();
        if counted == 0 {
            return Err(TensorError::DegenerateMask {
                op: "cross_entropy_from_logits",
                detail: "every target is ignore_index".into(),
            });
        }
        let mut probs = vec![E::zero(); n * v];
        let mut loss = E::zero();
        let all_keys = vec![true; v];
        for row in 0..n {
            let src = &tl.data()[row * v..(row + 1) * v];
            let dst = &mut probs[row * v..(row + 1) * v];
            softmax_row_masked(src, &all_keys, dst);
            let t = targets[row];
            if t != ignore_index {
                let p = dst[t as usize];
                loss += -(p.maximum(E::from_f64(f64::MIN_POSITIVE))).ln();
            }
        }
        loss = loss * E::from_f64(1.0 / counted as f64);
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits, targets: targets.to_vec(), ignore_index, probs, counted },
            req,
        ))
    }

    /// Mean binary cross entropy of probabilities against 0/1 labels over
    /// positions where `mask` is true. Probabilities are clipped to
    /// `[1e-7, 1 - 1e-7]` before the log; the gradient is zero in the
    /// clipped region.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        labels: &Tensor<E>,
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let tp = self.value(probs);
        if labels.shape() != tp.shape() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("labels {:?} vs probs {:?}", labels.shape(), tp.shape()),
            ));
        }
        if mask.len() != tp.numel() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("mask length {} vs {} elements", mask.len(), tp.numel()),
            ));
        }
        let counted = mask.iter().filter(|&&m| m).count();
        if counted == 0 {
            return Err(TensorError::DegenerateMask {
                op: "binary_cross_entropy",
                detail: "empty element mask".into(),
            });
        }
        let (lo, hi) = (E::from_f64(BCE_CLIP), E::from_f64(1.0 - BCE_CLIP));
        let one = E::one();
        let mut loss = E::zero();
        for i in 0..tp.numel() {
            if !mask[i] {
                continue;
            }
            let p = tp.data()[i].maximum(lo).minimum(hi);
            let y = labels.data()[i];
            loss += -(y * p.ln() + (one - y) * (one - p).ln());
        }
        loss = loss * E::from_f64(1.0 / counted as f64);
        let req = self.requires(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy { probs, labels: labels.data().to_vec(), mask: mask.to_vec(), counted },
            req,
        ))
    }

    pub fn custom(&mut self, x: Var, op: Box<dyn CustomOp<E>>) -> Result<Var, TensorError> {
        let out = op.forward(self.value(x));
        let req = self.requires(x);
        Ok(self.push(out, Op::Custom { x, op }, req))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar loss. Populates the gradient of
    /// every `requires_grad` node at or before the loss (zeros where the
    /// loss does not depend on the node). A tape can run backward once.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let li = loss.0;
        {
            let lt = &self.values[li];
            if lt.numel() != 1 {
                return Err(TensorError::InvalidLoss(format!("loss shape {:?} is not scalar", lt.shape())));
            }
            if !lt.item().is_finite() {
                return Err(TensorError::InvalidLoss(format!("loss value {:?} is not finite", lt.item().to_f64())));
            }
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.values.len()];
        for i in 0..=li {
            if self.values[i].requires_grad() {
                grads[i] = Some(vec![E::zero(); self.values[i].numel()]);
            }
        }
        if let Some(g) = grads[li].as_mut() {
            g[0] = E::one();
        }
        for i in (0..=li).rev() {
            if !self.values[i].requires_grad() {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if self.values[i].requires_grad() {
                self.values[i].set_grad(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let val = |v: Var| -> &Tensor<E> { &self.values[v.0] };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [E])| {
            if let Some(slot) = grads[v.0].as_mut() {
                f(slot);
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |d| add_into(d, g));
                let d_row = val(*row).numel();
                acc(*row, &mut |d| {
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % d_row] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j] * va[j] / (vb[j] * vb[j]);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, &mut |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                });
            }
            Op::AddScalar(x) => {
                acc(*x, &mut |d| add_into(d, g));
            }
            Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = ta.shape();
                let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let r = if *transpose_b {
                    tb.shape()[tb.rank() - 2]
                } else {
                    tb.shape()[tb.rank() - 1]
                };
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if !*transpose_b {
                    // c = a·b: da += g·bᵀ, db += aᵀ·g
                    acc(*a, &mut |d| {
                        for bi in 0..batch {
                            matmul_nt_kernel(
                                &g[bi * p * r..(bi + 1) * p * r],
                                &tb.data()[bi * q * r..(bi + 1) * q * r],
                                &mut d[bi * p * q..(bi + 1) * p * q],
                                p,
                                r,
                                q,
                            );
                        }
                    });
                    acc(*b, &mut |d| {
                        for bi in 0..batch {
                            matmul_tn_kernel(
                                &ta.data()[bi * p * q..(bi + 1) * p * q],
                                &g[bi * p * r..(bi + 1) * p * r],
                                &mut d[bi * q * r..(bi + 1) * q * r],
                                p,
                                q,
                                r,
                            );
                        }
                    });
                } else {
                    // c = a·bᵀ with b[r, q]: da += g·b, db += gᵀ·a
                    acc(*a, &mut |d| {
                        for bi in 0..batch {
                            matmul_nn_kernel(
                                &g[bi * p * r..(bi + 1) * p * r],
                                &tb.data()[bi * r * q..(bi + 1) * r * q],
                                &mut d[bi * p * q..(bi + 1) * p * q],
                                p,
                                r,
                                q,
                            );
                        }
                    });
                    acc(*b, &mut |d| {
                        for bi in 0..batch {
                            matmul_tn_kernel(
                                &g[bi * p * r..(bi + 1) * p * r],
                                &ta.data()[bi * p * q..(bi + 1) * p * q],
                                &mut d[bi * r * q..(bi + 1) * r * q],
                                p,
                                r,
                                q,
                            );
                        }
                    });
                }
            }
            Op::Permute { x, axes } => {
                let out_shape: Vec<usize> = axes.iter().map(|&a| val(*x).shape()[a]).collect();
                let mut inverse = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                let (_, gx) = permute_data(g, &out_shape, &inverse);
                acc(*x, &mut |d| add_into(d, &gx));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| add_into(d, g));
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.values[i].shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row_out = out_shape[axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let len_p = val(p).shape()[axis] * inner;
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * row_out + offset..o * row_out + offset + len_p];
                            add_into(&mut d[o * len_p..(o + 1) * len_p], src);
                        }
                    });
                    offset += len_p;
                }
            }
            Op::Slice { x, axis, start } => {
                let (axis, start) = (*axis, *start);
                let in_shape = val(*x).shape().to_vec();
                let out_shape = self.values[i].shape();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let row_in = in_shape[axis] * inner;
                let row_out = out_shape[axis] * inner;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[o * row_in + start * inner..o * row_in + start * inner + row_out];
                        add_into(dst, &g[o * row_out..(o + 1) * row_out]);
                    }
                });
            }
            Op::GatherRows { x, ids } => {
                let inner: usize = val(*x).shape()[1..].iter().product();
                acc(*x, &mut |d| {
                    for (o, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * inner..(id + 1) * inner], &g[o * inner..(o + 1) * inner]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if vx[j] > E::zero() {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.values[i].data();
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j] * (E::one() - y[j]);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x).data();
                let (lo, hi) = (*lo, *hi);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if vx[j] > lo && vx[j] < hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if va[j] <= vb[j] {
                            d[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        if vb[j] < va[j] {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if va[j] >= vb[j] {
                            d[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        if vb[j] > va[j] {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::MaskedSoftmax { scores, key_mask } => {
                let probs = self.values[i].data();
                let k = key_mask.len();
                let rows = probs.len() / k;
                acc(*scores, &mut |d| {
                    for row in 0..rows {
                        let p = &probs[row * k..(row + 1) * k];
                        let gr = &g[row * k..(row + 1) * k];
                        let mut dot = E::zero();
                        for j in 0..k {
                            dot += p[j] * gr[j];
                        }
                        let dst = &mut d[row * k..(row + 1) * k];
                        for j in 0..k {
                            dst[j] += p[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let tx = val(*x);
                let d_dim = *tx.shape().last().unwrap();
                let rows = tx.numel() / d_dim;
                let vg = val(*gain).data();
                let vx = tx.data();
                let inv_d = E::from_f64(1.0 / d_dim as f64);
                acc(*x, &mut |d| {
                    for row in 0..rows {
                        let (mean, inv_std) = cache[row];
                        let xs = &vx[row * d_dim..(row + 1) * d_dim];
                        let gs = &g[row * d_dim..(row + 1) * d_dim];
                        // dxhat_j = g_j * gain_j; dx from the standard LN backward.
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for j in 0..d_dim {
                            let xhat = (xs[j] - mean) * inv_std;
                            let dxhat = gs[j] * vg[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dst = &mut d[row * d_dim..(row + 1) * d_dim];
                        for j in 0..d_dim {
                            let xhat = (xs[j] - mean) * inv_std;
                            let dxhat = gs[j] * vg[j];
                            dst[j] += inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for row in 0..rows {
                        let (mean, inv_std) = cache[row];
                        for j in 0..d_dim {
                            let xhat = (vx[row * d_dim + j] - mean) * inv_std;
                            d[j] += g[row * d_dim + j] * xhat;
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for row in 0..rows {
                        for j in 0..d_dim {
                            d[j] += g[row * d_dim + j];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                acc(*x, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                let gv = g[0] * E::from_f64(1.0 / n as f64);
                acc(*x, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::CrossEntropyLogits { logits, targets, ignore_index, probs, counted } => {
                let v = val(*logits).shape()[1];
                let scale = g[0] * E::from_f64(1.0 / *counted as f64);
                acc(*logits, &mut |d| {
                    for (row, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        let p = &probs[row * v..(row + 1) * v];
                        let dst = &mut d[row * v..(row + 1) * v];
                        for j in 0..v {
                            dst[j] += scale * p[j];
                        }
                        dst[t as usize] -= scale;
                    }
                });
            }
            Op::BinaryCrossEntropy { probs, labels, mask, counted } => {
                let vp = val(*probs).data();
                let (lo, hi) = (E::from_f64(BCE_CLIP), E::from_f64(1.0 - BCE_CLIP));
                let scale = g[0] * E::from_f64(1.0 / *counted as f64);
                let one = E::one();
                acc(*probs, &mut |d| {
                    for j in 0..d.len() {
                        if !mask[j] {
                            continue;
                        }
                        let p = vp[j];
                        if p <= lo || p >= hi {
                            continue;
                        }
                        d[j] += scale * (p - labels[j]) / (p * (one - p));
                    }
                });
            }
            Op::Dropout { x, keep, scale } => {
                let scale = *scale;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if keep[j] {
                            d[j] += g[j] * scale;
                        }
                    }
                });
            }
            Op::Custom { x, op } => {
                let gx = op.backward(val(*x), &self.values[i], g);
                acc(*x, &mut |d| add_into(d, &gx));
            }
        }
    }
}

/// Clip bound applied to probabilities inside `binary_cross_entropy`.
pub const BCE_CLIP: f64 = 1e-7;

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// c[p,r] += a[p,q] · b[q,r]
fn matmul_nn_kernel<E: Scalar>(a: &[E], b: &[E], c: &mut [E], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let crow = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for j in 0..r {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// c[p,r] += a[p,q] · b[r,q]ᵀ
fn matmul_nt_kernel<E: Scalar>(a: &[E], b: &[E], c: &mut [E], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let crow = &mut c[i * r..(i + 1) * r];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut s = E::zero();
            for k in 0..q {
                s += arow[k] * brow[k];
            }
            crow[j] += s;
        }
    }
}

/// c[q,r] += a[p,q]ᵀ · b[p,r]
fn matmul_tn_kernel<E: Scalar>(a: &[E], b: &[E], c: &mut [E], p: usize, q: usize, r: usize) {
    for k in 0..p {
        let arow = &a[k * q..(k + 1) * q];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            let crow = &mut c[i * r..(i + 1) * r];
            for j in 0..r {
                crow[j] += aki * brow[j];
            }
        }
    }
}

/// Numerically stable masked softmax of one row; masked keys get exactly 0.
fn softmax_row_masked<E: Scalar>(src: &[E], mask: &[bool], dst: &mut [E]) {
    let mut max = None::<E>;
    for (j, &m) in mask.iter().enumerate() {
        if m {
            max = Some(match max {
                Some(cur) => cur.maximum(src[j]),
                None => src[j],
            });
        }
    }
    let max = max.expect("mask checked non-empty");
    let mut sum = E::zero();
    for (j, &m) in mask.iter().enumerate() {
        if m {
            let e = (src[j] - max).exp();
            dst[j] = e;
            sum += e;
        } else {
            dst[j] = E::zero();
        }
    }
    let inv = E::one() / sum;
    for (j, &m) in mask.iter().enumerate() {
        if m {
            dst[j] = dst[j] * inv;
        }
    }
}

fn permute_data<E: Scalar>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut out = vec![E::zero(); data.len()];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        let mut in_off = 0usize;
        for d in 0..rank {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            in_off += c * in_strides[axes[d]];
        }
        *slot = data[in_off];
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TensorError;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1]);
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        let b_data = [0.5, -1.5, 2.0, 0.25, 1.0, -0.75];
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).with_requires_grad(true));
        let b = tape.constant(t64(&[3, 2], &b_data));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        // dA = ones[2,2] · Bᵀ, i.e. each row of dA is the row sums of B.
        let row_sums = [0.5 - 1.5, 2.0 + 0.25, 1.0 - 0.75];
        let ga = tape.grad(a).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((ga[r * 3 + c] - row_sums[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_uniform_and_single_key() {
        let mut tape = Tape::new();
        let s = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
        let p = tape.masked_softmax(s, &[true, true]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let s2 = tape.constant(t64(&[1, 2], &[5.0, -3.0]));
        let p2 = tape.masked_softmax(s2, &[true, false]).unwrap();
        assert_eq!(tape.value(p2).data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_matches_direct_exp_sum() {
        let scores = [1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let s = tape.constant(t64(&[1, 3], &scores));
        let p = tape.masked_softmax(s, &[true, true, true]).unwrap();
        let z: f64 = scores.iter().map(|v| v.exp()).sum();
        for (got, want) in tape.value(p).data().iter().zip(scores.iter().map(|v| v.exp() / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.masked_softmax(s, &[false, false, false]),
            Err(TensorError::DegenerateMask { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let g = tape.constant(t64(&[4], &[1.0; 4]));
        let b = tape.constant(t64(&[4], &[0.0; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        let a = 3.0;
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[-a, a]));
        let g = tape.constant(t64(&[2], &[1.0, 1.0]));
        let b = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-10).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] + 1.0).abs() < 1e-5);
        assert!((got[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let gain: Vec<f64> = (0..6).map(|i| 0.5 + 0.1 * i as f64).collect();
        let bias: Vec<f64> = (0..6).map(|i| -0.2 + 0.05 * i as f64).collect();
        let eps = 1e-5;
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 6], &data));
        let g = tape.constant(t64(&[6], &gain));
        let b = tape.constant(t64(&[6], &bias));
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        for row in 0..2 {
            let xs = &data[row * 6..(row + 1) * 6];
            let mean = xs.iter().sum::<f64>() / 6.0;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = (xs[j] - mean) / (var + eps).sqrt() * gain[j] + bias[j];
                let got = tape.value(y).data()[row * 6 + j];
                assert!((got - want).abs() < 1e-12, "row {row} col {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardAlreadyRun)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(TensorError::InvalidLoss(_))));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a·l1 + b·l2) == a·grad(l1) + b·grad(l2), elementwise.
        let xs = [0.7, -1.3, 2.1, 0.4];
        let (a, b) = (1.7, -0.6);
        let build = |tape: &mut Tape<f64>| -> (Var, Var, Var) {
            let x = tape.leaf(t64(&[4], &xs).with_requires_grad(true));
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum_all(sq);
            let sg = tape.sigmoid(x);
            let l2 = tape.mean_all(sg);
            (x, l1, l2)
        };
        let mut t1 = Tape::new();
        let (x1, l1, _) = build(&mut t1);
        t1.backward(l1).unwrap();
        let g1 = t1.grad(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let (x2, _, l2) = build(&mut t2);
        t2.backward(l2).unwrap();
        let g2 = t2.grad(x2).unwrap().to_vec();

        let mut t3 = Tape::new();
        let (x3, l31, l32) = build(&mut t3);
        let sa = t3.scale(l31, a);
        let sb = t3.scale(l32, b);
        let combined = t3.add(sa, sb).unwrap();
        t3.backward(combined).unwrap();
        let g3 = t3.grad(x3).unwrap();

        for j in 0..4 {
            assert!((g3[j] - (a * g1[j] + b * g2[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[3, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        let parts = tape.split(cat, 0, &[2, 3]).unwrap();
        assert_eq!(tape.value(parts[0]).data(), tape.value(a).data());
        assert_eq!(tape.value(parts[1]).data(), tape.value(b).data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 7usize;
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, v]));
        let loss = tape.cross_entropy_from_logits(logits, &[0, 3, -100], -100).unwrap();
        assert!((tape.value(loss).item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            tape.cross_entropy_from_logits(logits, &[-100, -100], -100),
            Err(TensorError::DegenerateMask { .. })
        ));
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::filled(&[4], 0.5));
        let labels = t64(&[4], &[1.0, 0.0, 1.0, 0.0]);
        let loss = tape.binary_cross_entropy(p, &labels, &[true; 4]).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_predictions_are_near_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(t64(&[3], &[1.0, 0.0, 1.0]));
        let labels = t64(&[3], &[1.0, 0.0, 1.0]);
        let loss = tape.binary_cross_entropy(p, &labels, &[true; 3]).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn gather_rows_accumulates_gradients() {
        let mut tape = Tape::new();
        let table = tape.leaf(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad(true));
        let rows = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum_all(rows);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 3, 4], &data));
        let p = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(p).shape(), &[3, 2, 4]);
        let back = tape.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
    }
}
