//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, attention, conv, norm, resize, softmax, split_axis, vol_dims};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar, Strided};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: conv::ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv: Vec<T>, dims: [usize; 3], batch_mode: bool },
    Upsample { x: Var, dims: [usize; 4], factor: usize },
    AvgPool { x: Var, dims: [usize; 4], window: usize },
    SpatialMean { x: Var, bc: usize, s: usize },
    MeanRows { x: Var, n: usize, c: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, n: usize, inner: usize, start: usize, len: usize },
    Gather { x: Var, base: usize, spatial: usize, channels: usize, indices: Vec<usize> },
    Broadcast { x: Var, s: usize },
    Index0 { x: Var, i: usize },
    Attention { x: Var, n: usize, c: usize },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Dice { p: Var, target: Vec<T>, eps: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One evaluation context: the recorded graph, the training flag consulted
/// by batchnorm layers, and pending buffer updates.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    training: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(TensorError::dim(op, a, b))
    }
}

fn vol(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    vol_dims(shape).ok_or_else(|| TensorError::arg(op, format!("expected rank 4 or 5, got {shape:?}")))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// An inference-mode tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), training: false, updates: Vec::new() }
    }

    pub fn training() -> Self {
        Tape { training: true, ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// The tape node for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, attention::elu, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / T::of(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::arg(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), Strided::rows(k), self.data(b), Strided::rows(n), T::zero(), &mut out, Strided::rows(n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims("transpose", a)?;
        let src = self.data(a);
        let out = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// `x[..., n] + b[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return Err(TensorError::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::arg("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let y = softmax::forward(self.data(x), outer, n, inner);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// 3D convolution; weight `[cout, cin, k, k, k]` with `k` ∈ {1, 3}.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, cin, d, h, wd] = vol("conv3d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let (cout, k) = match ws[..] {
            [co, ci, k1, k2, k3] if k1 == k2 && k2 == k3 && (k1 == 1 || k1 == 3) => {
                if ci != cin {
                    return Err(TensorError::dim("conv3d", self.shape(x), &ws));
                }
                (co, k1)
            }
            _ => return Err(TensorError::arg("conv3d", format!("bad kernel shape {ws:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::dim("conv3d", &ws, self.shape(b)));
            }
        }
        let geom = conv::ConvGeom { batch, cin, cout, d, h, w: wd, k };
        let out = conv::forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 4] = cout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv { x, w, b, geom }, rg))
    }

    fn norm_dims(&self, x: Var) -> Result<[usize; 3]> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(TensorError::arg("batch_norm", format!("expected [batch, channels, ...], got {shape:?}")));
        }
        Ok([shape[0], shape[1], shape[2..].iter().product()])
    }

    /// Batch-statistics normalization of `[batch, channels, ...]`; returns
    /// the output and the batch mean and (biased) variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let dims = self.norm_dims(x)?;
        let [b, c, s] = dims;
        same_shape("batch_norm", self.shape(gamma), &[c])?;
        same_shape("batch_norm", self.shape(beta), &[c])?;
        let stats = norm::batch_stats(self.data(x), b, c, s);
        let inv = norm::inv_std(&stats.var, eps);
        let y = norm::normalize(self.data(x), b, c, s, &stats.mean, &inv, self.data(gamma), self.data(beta));
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, mean: stats.mean.clone(), inv, dims, batch_mode: true };
        Ok((self.push(t, op, rg), stats.mean, stats.var))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let dims = self.norm_dims(x)?;
        let [b, c, s] = dims;
        same_shape("batch_norm", self.shape(gamma), &[c])?;
        same_shape("batch_norm", self.shape(beta), &[c])?;
        same_shape("batch_norm", &[mean.len(), var.len()], &[c, c])?;
        let inv = norm::inv_std(var, eps);
        let y = norm::normalize(self.data(x), b, c, s, mean, &inv, self.data(gamma), self.data(beta));
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, mean: mean.to_vec(), inv, dims, batch_mode: false };
        Ok(self.push(t, op, rg))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::arg("trilinear_upsample", "factor must be >= 1"));
        }
        let [b, c, d, h, w] = vol("trilinear_upsample", self.shape(x))?;
        let dims = [b * c, d, h, w];
        let y = resize::upsample(self.data(x), b * c, d, h, w, factor);
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        for s in &mut shape[r - 3..] {
            *s *= factor;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Upsample { x, dims, factor }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let [b, c, d, h, w] = vol("avg_pool3d", self.shape(x))?;
        if window == 0 || d % window != 0 || h % window != 0 || w % window != 0 {
            return Err(TensorError::dim("avg_pool3d", self.shape(x), &[window, window, window]));
        }
        let y = resize::avg_pool(self.data(x), b * c, d, h, w, window);
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        for s in &mut shape[r - 3..] {
            *s /= window;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, y)?, Op::AvgPool { x, dims: [b * c, d, h, w], window }, rg))
    }

    /// Mean over all axes after the first two: `[b, c, ...] -> [b, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let [b, c, s] = self.norm_dims(x)?;
        let data = self.data(x).chunks(s).map(|r| r.iter().copied().sum::<T>() / T::of(s as f64)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[b, c], data)?, Op::SpatialMean { x, bc: b * c, s }, rg))
    }

    /// Set average pooling, `[n, c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.mat_dims("global_avg_pool", x)?;
        if n == 0 {
            return Err(TensorError::arg("global_avg_pool", "empty set"));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); c];
        for r in src.chunks(c) {
            add_into(&mut out, r);
        }
        let inv = T::of(1.0 / n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c], out)?, Op::MeanRows { x, n, c }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::arg("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::arg("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::dim("concat", &first, s));
            }
            sizes.push((p, s[axis]));
        }
        let total: usize = sizes.iter().map(|&(_, n)| n).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, n) in &sizes {
                out.extend_from_slice(&self.data(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: sizes, outer, inner }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::arg("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&s, out)?, Op::Slice { x, outer, n, inner, start, len }, rg))
    }

    /// Feature vectors at the given flat voxel indices of batch item `batch`:
    /// `[b, c, d, h, w] -> [indices.len(), c]`.
    pub fn gather_points(&mut self, x: Var, batch: usize, indices: &[usize]) -> Result<Var> {
        let [b, c, d, h, w] = vol("gather_points", self.shape(x))?;
        let s = d * h * w;
        if batch >= b {
            return Err(TensorError::arg("gather_points", format!("batch index {batch} >= {b}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s) {
            return Err(TensorError::arg("gather_points", format!("voxel index {bad} >= {s}")));
        }
        let base = batch * c * s;
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend((0..c).map(|ch| src[base + ch * s + i]));
        }
        let rg = self.rg(&[x]);
        let op = Op::Gather { x, base, spatial: s, channels: c, indices: indices.to_vec() };
        Ok(self.push(Tensor::new(&[indices.len(), c], out)?, op, rg))
    }

    /// Tiles `[b, k]` over a spatial grid: `-> [b, k, d, h, w]`.
    pub fn broadcast_spatial(&mut self, x: Var, spatial: [usize; 3]) -> Result<Var> {
        let (b, k) = self.mat_dims("broadcast_spatial", x)?;
        let s: usize = spatial.iter().product();
        let mut out = Vec::with_capacity(b * k * s);
        for &v in self.data(x) {
            out.extend(std::iter::repeat_n(v, s));
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(&[b, k, spatial[0], spatial[1], spatial[2]], out)?;
        Ok(self.push(t, Op::Broadcast { x, s }, rg))
    }

    /// `x[i]` along the leading axis.
    pub fn index0(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || i >= shape[0] {
            return Err(TensorError::arg("index0", format!("index {i} out of range for {shape:?}")));
        }
        let n: usize = shape[1..].iter().product();
        let data = self.data(x)[i * n..(i + 1) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape[1..], data)?, Op::Index0 { x, i }, rg))
    }

    /// Single-head scaled dot-product self-attention with ELU values,
    /// `softmax(X Xᵀ / √c) · ELU(X)` for `X: [n, c]`.
    pub fn attention(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.mat_dims("attn", x)?;
        if n == 0 {
            return Err(TensorError::arg("attn", "empty point set"));
        }
        let y = attention::forward(self.data(x), n, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c], y)?, Op::Attention { x, n, c }, rg))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        if target >= n {
            return Err(TensorError::arg("cross_entropy", format!("target {target} >= {n} classes")));
        }
        let data = self.data(logits);
        let probs = softmax::forward(data, 1, n, 1);
        let m = data.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + data.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
        let loss = T::of(lse - data[target].f64());
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Soft dice loss `1 − (2Σpt + ε) / (Σp + Σt + ε)` against a constant target.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        if self.value(p).numel() != target.numel() {
            return Err(TensorError::dim("dice_loss", self.shape(p), target.shape()));
        }
        let (inter, total) = dice_terms(self.data(p), target.data());
        let loss = 1.0 - (2.0 * inter + eps) / (total + eps);
        let rg = self.rg(&[p]);
        let op = Op::Dice { p, target: target.data().to_vec(), eps };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, rg))
    }

    /// Reverse pass from a single-element `loss`.
    /// Hash of every discrete choice recorded on the tape: the graph
    /// structure, the sign pattern at each relu and the gathered indices.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        feed(self.nodes.len() as u64);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for chunk in self.data(*a).chunks(64) {
                        feed(chunk.iter().enumerate().fold(0u64, |m, (i, &x)| m | (((x > T::zero()) as u64) << i)));
                    }
                }
                Op::Gather { indices, .. } => indices.iter().for_each(|&i| feed(i as u64)),
                _ => {}
            }
        }
        h
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::arg("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { leaves: HashMap::new(), params: Vec::new() };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    out.params.push((*id, Tensor::new(node.value.shape(), g)?));
                }
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        // Adds `delta` into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, delta: &[T]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, delta),
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        let x_of = |v: Var| self.data(v);
        let y = y.data();
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                acc(a, &g);
                acc(b, &g);
            }
            Op::Sub(a, b) => {
                acc(a, &g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                acc(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<T> = g.iter().zip(x_of(b)).map(|(&u, &v)| u * v).collect();
                let gb: Vec<T> = g.iter().zip(x_of(a)).map(|(&u, &v)| u * v).collect();
                acc(a, &ga);
                acc(b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<T> = g.iter().map(|&v| v * s).collect();
                acc(a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<T> = g.iter().zip(y).map(|(&u, &v)| u * v).collect();
                acc(a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<T> =
                    g.iter().zip(x_of(a)).map(|(&u, &v)| if v > T::zero() { u } else { T::zero() }).collect();
                acc(a, &ga);
            }
            Op::Elu(a) => {
                let ga: Vec<T> = g.iter().zip(x_of(a)).map(|(&u, &v)| u * attention::elu_grad(v)).collect();
                acc(a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<T> = g.iter().zip(y).map(|(&u, &s)| u * s * (T::one() - s)).collect();
                acc(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; x_of(a).len()];
                acc(a, &ga);
            }
            Op::Mean(a) => {
                let n = x_of(a).len();
                let ga = vec![g[0] / T::of(n as f64); n];
                acc(a, &ga);
            }
            Op::Reshape(a) => acc(a, &g),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, &g, Strided::rows(n), x_of(b), Strided::new(0, 1, n), T::zero(), &mut ga, Strided::rows(k));
                    acc(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, x_of(a), Strided::new(0, 1, k), &g, Strided::rows(n), T::zero(), &mut gb, Strided::rows(n));
                    acc(b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let ga: Vec<T> = (0..r * c).map(|i| g[(i % c) * r + i / c]).collect();
                acc(a, &ga);
            }
            Op::AddBias(x, b) => {
                acc(x, &g);
                let n = self.value(b).numel();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    add_into(&mut gb, row);
                }
                acc(b, &gb);
            }
            Op::Softmax { x, outer, n, inner } => {
                let gx = softmax::backward(y, &g, outer, n, inner);
                acc(x, &gx);
            }
            Op::Conv { x, w, b, ref geom } => {
                let need_x = self.nodes[x.0].requires_grad;
                let cg = conv::backward(geom, x_of(x), x_of(w), &g, need_x);
                if let Some(gx) = cg.x {
                    acc(x, &gx);
                }
                acc(w, &cg.w);
                if let Some(b) = b {
                    acc(b, &cg.bias);
                }
            }
            Op::BatchNorm { x, gamma, beta, ref mean, ref inv, dims: [b, c, s], batch_mode } => {
                let ng = norm::backward(x_of(x), &g, b, c, s, mean, inv, x_of(gamma), batch_mode);
                acc(x, &ng.x);
                acc(gamma, &ng.gamma);
                acc(beta, &ng.beta);
            }
            Op::Upsample { x, dims: [bc, d, h, w], factor } => {
                let gx = resize::upsample_grad(&g, bc, d, h, w, factor);
                acc(x, &gx);
            }
            Op::AvgPool { x, dims: [bc, d, h, w], window } => {
                let gx = resize::avg_pool_grad(&g, bc, d, h, w, window);
                acc(x, &gx);
            }
            Op::SpatialMean { x, bc, s } => {
                let inv = T::of(1.0 / s as f64);
                let mut gx = Vec::with_capacity(bc * s);
                for &v in &g[..bc] {
                    gx.extend(std::iter::repeat_n(v * inv, s));
                }
                acc(x, &gx);
            }
            Op::MeanRows { x, n, c } => {
                let inv = T::of(1.0 / n as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let gx: Vec<T> = (0..n * c).map(|i| row[i % c]).collect();
                acc(x, &gx);
            }
            Op::Concat { ref parts, outer, inner } => {
                let total: usize = parts.iter().map(|&(_, n)| n).sum();
                let mut offset = 0;
                for &(p, n) in parts {
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + n * inner]);
                    }
                    acc(p, &gp);
                    offset += n;
                }
            }
            Op::Slice { x, outer, n, inner, start, len } => {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(x, &gx);
            }
            Op::Gather { x, base, spatial, channels, ref indices } => {
                let mut gx = vec![T::zero(); x_of(x).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for ch in 0..channels {
                        gx[base + ch * spatial + i] += g[r * channels + ch];
                    }
                }
                acc(x, &gx);
            }
            Op::Broadcast { x, s } => {
                let gx: Vec<T> = g.chunks(s).map(|r| r.iter().copied().sum()).collect();
                acc(x, &gx);
            }
            Op::Index0 { x, i } => {
                let n = g.len();
                let mut gx = vec![T::zero(); x_of(x).len()];
                gx[i * n..(i + 1) * n].copy_from_slice(&g);
                acc(x, &gx);
            }
            Op::Attention { x, n, c } => {
                let gx = attention::backward(x_of(x), y, &g, n, c);
                acc(x, &gx);
            }
            Op::CrossEntropy { logits, target, ref probs } => {
                let gl: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| g[0] * if j == target { p - T::one() } else { p })
                    .collect();
                acc(logits, &gl);
            }
            Op::Dice { p, ref target, eps } => {
                let (inter, total) = dice_terms(x_of(p), target);
                let den = total + eps;
                let num = 2.0 * inter + eps;
                let g0 = g[0].f64();
                let gp: Vec<T> =
                    target.iter().map(|&t| T::of(-g0 * (2.0 * t.f64() * den - num) / (den * den))).collect();
                acc(p, &gp);
            }
        }
    }
}

fn dice_terms<T: Scalar>(p: &[T], t: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(t) {
        inter += a.f64() * b.f64();
        total += a.f64() + b.f64();
    }
    (inter, total)
}

/// Attention weights of one head without recording anything.
pub fn attention_weights<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match *x.shape() {
        [n, c] if n > 0 => Tensor::new(&[n, n], kernels::attention::weights(x.data(), n, c)),
        ref s => Err(TensorError::arg("attn", format!("expected a non-empty [n, c] matrix, got {s:?}"))),
    }
}
