//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Nodes are appended in execution
//! order, so the tape is already topologically sorted; [`Graph::backward`]
//! walks it once in reverse. The graph is dropped after the backward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, dot, exp_shifted, matmul_acc, matmul_nt_acc, matmul_tn_acc, max, rows_mul, rows_mul_nt,
    rows_mul_tn, sum, transpose, Tensor, ROW_BLOCK,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Pick { x: Var, index: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    Im2col { x: Var, geom: Conv2dGeometry },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only inputs and variables.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter from the store. Repeated calls return the same node.
    /// Frozen parameters are bound as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let value = store.value(id).clone();
        let v = self.push(value, Op::Leaf, !store.is_frozen(id));
        self.bound.insert(id, v);
        v
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound, trainable parameter reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| {
                let g = self.grad(v)?;
                let t = Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).ok()?;
                Some((id, t))
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        if axis >= self.value(x).ndim() {
            return Err(Error::shape(format!(
                "{what}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// `x[L×in] · w[out×in]ᵀ (+ b[out])`, a fully connected layer applied per row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, fan_in) = self.dims2(x)?;
        let (fan_out, w_in) = self.dims2(w)?;
        if w_in != fan_in {
            return Err(Error::shape(format!(
                "linear: input {:?} does not match weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} does not match weight {:?}",
                    self.shape(b),
                    self.shape(w)
                )));
            }
        }
        let mut out = vec![0.0; rows * fan_out];
        matmul_nt_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, fan_in, fan_out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::new(vec![rows, fan_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `x[L×D] + b[D]`, the bias broadcast over the leading axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.shape(b) != [cols] {
            return Err(Error::shape(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {:?} incompatible with {base:?}",
                    s
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::shape(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean along `axis`; the axis is removed (a 1-D input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for d in &mut data {
            *d /= n as f64;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxis { x, axis }, rg))
    }

    /// Selects one element of a flattened tensor as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            Error::shape(format!("pick index {index} out of range for {:?}", t.shape()))
        })?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    /// Layer normalization over the last axis of a 2-D input with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match width {cols}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized[r * cols + c] = n;
                out[r * cols + c] = n * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Fused multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q: [Lq×D]`, `k, v: [Lk×D]`. Head `h` uses columns `h·D/heads ..`; the
    /// output concatenates heads along the columns. Only the per-head attention
    /// probabilities are retained for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (lq, d) = self.dims2(q)?;
        let (lk, dk) = self.dims2(k)?;
        let (lv, dv) = self.dims2(v)?;
        if dk != d || dv != d || lv != lk {
            return Err(Error::shape(format!(
                "attention: q {:?}, k {:?}, v {:?} are inconsistent",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let mut out = vec![0.0; lq * d];
        let mut probs = Vec::with_capacity(heads);
        // keys and values are transposed per head so the kernels run
        // contiguously over the key axis, a block of query rows at a time
        let mut o = vec![0.0; ROW_BLOCK * hd];
        for h in 0..heads {
            let mut qh = head_columns(self.value(q).data(), lq, d, h, hd);
            qh.iter_mut().for_each(|x| *x *= scale);
            let kt = head_columns_t(self.value(k).data(), lk, d, h, hd);
            let vt = head_columns_t(self.value(v).data(), lk, d, h, hd);
            let mut p = vec![0.0; lq * lk];
            for i0 in (0..lq).step_by(ROW_BLOCK) {
                let rows = ROW_BLOCK.min(lq - i0);
                let block = &mut p[i0 * lk..(i0 + rows) * lk];
                rows_mul(&qh[i0 * hd..], &kt, block, rows, hd, lk);
                block.chunks_exact_mut(lk).for_each(softmax_in_place);
                let o = &mut o[..rows * hd];
                o.fill(0.0);
                rows_mul_nt(block, &vt, o, rows, lk, hd);
                for (r, src) in o.chunks_exact(hd).enumerate() {
                    let at = (i0 + r) * d + h * hd;
                    out[at..at + hd].copy_from_slice(src);
                }
            }
            probs.push(p);
        }
        let out = Tensor::new(vec![lq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities `[Lq×Lk]` per head recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Unfolds a channels-last image `[H×W×C]` into convolution patches
    /// `[(Ho·Wo) × (k·k·C)]`, patch columns ordered `(ky, kx, c)`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (height, width, channels) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::shape(format!("im2col expects [H, W, C], got {s:?}"))),
        };
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return Err(Error::shape(format!(
                "im2col: kernel {kernel} does not fit input {height}x{width} with padding {pad}"
            )));
        }
        let geom = Conv2dGeometry {
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        };
        let src = self.value(x).data();
        let cols = kernel * kernel * channels;
        let mut data = vec![0.0; geom.out_height * geom.out_width * cols];
        for_each_patch_tap(&geom, |row, col, src_idx| {
            data[row * cols + col] = src[src_idx];
        });
        let out = Tensor::new(vec![geom.out_height * geom.out_width, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Im2col { x, geom }, rg))
    }

    /// Reverse pass from a scalar `root`. Gradients accumulate (sum) over all
    /// paths; every reachable node that requires a gradient receives one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_add(&mut self, v: Var, g: &[f64], sign: f64) {
        self.acc(v, |slot| {
            for (s, &x) in slot.iter_mut().zip(g) {
                *s += sign * x;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so saved buffers can be read while grads mutate.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = self.dims2(a).expect("2-D");
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g, self.value(b).data(), &mut da, m, n, k);
                    self.acc_add(a, &da, 1.0);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(self.value(a).data(), g, &mut db, k, m, n);
                    self.acc_add(b, &db, 1.0);
                }
            }
            &Op::Linear { x, w, b } => {
                let (rows, fan_in) = self.dims2(x).expect("2-D");
                let fan_out = self.shape(w)[0];
                if self.rg(x) {
                    let mut dx = vec![0.0; rows * fan_in];
                    matmul_acc(g, self.value(w).data(), &mut dx, rows, fan_out, fan_in);
                    self.acc_add(x, &dx, 1.0);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    matmul_tn_acc(g, self.value(x).data(), &mut dw, fan_out, rows, fan_in);
                    self.acc_add(w, &dw, 1.0);
                }
                if let Some(b) = b {
                    self.acc(b, |slot| {
                        for row in g.chunks_exact(fan_out) {
                            for (s, &gv) in slot.iter_mut().zip(row) {
                                *s += gv;
                            }
                        }
                    });
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.dims2(a).expect("2-D");
                let ga = transpose(g, c, r);
                self.acc_add(a, &ga, 1.0);
            }
            &Op::Add(a, b) => {
                self.acc_add(a, g, 1.0);
                self.acc_add(b, g, 1.0);
            }
            &Op::Sub(a, b) => {
                self.acc_add(a, g, 1.0);
                self.acc_add(b, g, -1.0);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.acc_add(a, &ga, 1.0);
                }
                if self.rg(b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.acc_add(b, &gb, 1.0);
                }
            }
            &Op::Scale(a, c) => self.acc_add(a, g, c),
            &Op::AddRow(x, b) => {
                self.acc_add(x, g, 1.0);
                let cols = self.shape(b)[0];
                self.acc(b, |slot| {
                    for row in g.chunks_exact(cols) {
                        for (s, &x) in slot.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                });
            }
            &Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc_add(a, &ga, 1.0);
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let ga: Vec<f64> = g.iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                self.acc_add(a, &ga, 1.0);
            }
            &Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = axis_split(y.shape(), axis);
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + c;
                        let s: f64 = (0..n).map(|j| g[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = yd[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                self.acc_add(x, &gx, 1.0);
            }
            &Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().expect("non-empty");
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks_exact(n).zip(y.data().chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((o, &gv), &lv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - lv.exp() * s;
                    }
                }
                self.acc_add(x, &gx, 1.0);
            }
            &Op::Reshape(x) => self.acc_add(x, g, 1.0),
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.acc_add(v, &gv, 1.0);
                    }
                    offset += n;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let len = self.nodes[i].value.shape()[axis];
                self.acc(x, |slot| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for (s, &gv) in slot[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *s += gv;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                self.acc(x, |slot| slot.iter_mut().for_each(|s| *s += g0));
            }
            &Op::Mean(x) => {
                let g0 = g[0] / self.value(x).numel() as f64;
                self.acc(x, |slot| slot.iter_mut().for_each(|s| *s += g0));
            }
            &Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let inv = 1.0 / n as f64;
                self.acc(x, |slot| {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut slot[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (s, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *s += gv * inv;
                            }
                        }
                    }
                });
            }
            &Op::Pick { x, index } => {
                let g0 = g[0];
                self.acc(x, |slot| slot[index] += g0);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = self.dims2(*x).expect("2-D");
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * normalized[r * cols + c];
                        }
                    }
                    self.acc_add(*gamma, &gg, 1.0);
                }
                if self.rg(*beta) {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks_exact(cols) {
                        for (s, &gv) in gb.iter_mut().zip(row) {
                            *s += gv;
                        }
                    }
                    self.acc_add(*beta, &gb, 1.0);
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let mut gx = vec![0.0; rows * cols];
                    let inv_n = 1.0 / cols as f64;
                    for r in 0..rows {
                        let xr = &normalized[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dxhat: Vec<f64> = gr.iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() * inv_n;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() * inv_n;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    self.acc_add(*x, &gx, 1.0);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.backprop_attention(g, *q, *k, *v, *heads, *scale, probs),
            Op::Im2col { x, geom } => {
                let cols = geom.kernel * geom.kernel * geom.channels;
                self.acc(*x, |slot| {
                    for_each_patch_tap(geom, |row, col, src_idx| {
                        slot[src_idx] += g[row * cols + col];
                    });
                });
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(&mut self, g: &[f64], q: Var, k: Var, v: Var, heads: usize, scale: f64, probs: &[Vec<f64>]) {
        let (lq, d) = self.dims2(q).expect("2-D");
        let lk = self.shape(k)[0];
        let hd = d / heads;
        let mut gq = vec![0.0; lq * d];
        let mut gk = vec![0.0; lk * d];
        let mut gv = vec![0.0; lk * d];
        let mut ds = vec![0.0; ROW_BLOCK * lk];
        let mut gqb = vec![0.0; ROW_BLOCK * hd];
        for (h, p) in probs.iter().enumerate() {
            let qh = head_columns(self.value(q).data(), lq, d, h, hd);
            let kt = head_columns_t(self.value(k).data(), lk, d, h, hd);
            let vt = head_columns_t(self.value(v).data(), lk, d, h, hd);
            let go = head_columns(g, lq, d, h, hd);
            let mut gkt = vec![0.0; hd * lk];
            let mut gvt = vec![0.0; hd * lk];
            for i0 in (0..lq).step_by(ROW_BLOCK) {
                let rows = ROW_BLOCK.min(lq - i0);
                let pb = &p[i0 * lk..(i0 + rows) * lk];
                let gob = &go[i0 * hd..(i0 + rows) * hd];
                // ds = dL/dP first, then the softmax Jacobian in place
                let dsb = &mut ds[..rows * lk];
                rows_mul(gob, &vt, dsb, rows, hd, lk);
                rows_mul_tn(gob, pb, &mut gvt, rows, hd, lk);
                for (dsr, pr) in dsb.chunks_exact_mut(lk).zip(pb.chunks_exact(lk)) {
                    let s = dot(dsr, pr);
                    for (dsj, &pij) in dsr.iter_mut().zip(pr) {
                        *dsj = pij * (*dsj - s) * scale;
                    }
                }
                let gqb = &mut gqb[..rows * hd];
                gqb.fill(0.0);
                rows_mul_nt(dsb, &kt, gqb, rows, lk, hd);
                for (r, src) in gqb.chunks_exact(hd).enumerate() {
                    let at = (i0 + r) * d + h * hd;
                    for (dst, &x) in gq[at..at + hd].iter_mut().zip(src) {
                        *dst += x;
                    }
                }
                rows_mul_tn(&qh[i0 * hd..], dsb, &mut gkt, rows, hd, lk);
            }
            for j in 0..lk {
                for c in 0..hd {
                    gk[j * d + h * hd + c] += gkt[c * lk + j];
                    gv[j * d + h * hd + c] += gvt[c * lk + j];
                }
            }
        }
        self.acc_add(q, &gq, 1.0);
        self.acc_add(k, &gk, 1.0);
        self.acc_add(v, &gv, 1.0);
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

fn softmax_in_place(row: &mut [f64]) {
    exp_shifted(row, max(row));
    let total = sum(row);
    let inv = 1.0 / total;
    for s in row.iter_mut() {
        *s *= inv;
    }
}

fn head_columns(data: &[f64], rows: usize, d: usize, h: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * hd);
    for r in 0..rows {
        out.extend_from_slice(&data[r * d + h * hd..r * d + (h + 1) * hd]);
    }
    out
}

/// Head `h` columns as a `[hd × rows]` matrix.
fn head_columns_t(data: &[f64], rows: usize, d: usize, h: usize, hd: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * hd];
    for r in 0..rows {
        for c in 0..hd {
            out[c * rows + r] = data[r * d + h * hd + c];
        }
    }
    out
}

/// Calls `f(patch_row, patch_col, source_index)` for every in-bounds tap.
fn for_each_patch_tap(geom: &Conv2dGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let c = geom.channels;
    for oy in 0..geom.out_height {
        for ox in 0..geom.out_width {
            let row = oy * geom.out_width + ox;
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let src = (iy as usize * geom.width + ix as usize) * c;
                    let col = (ky * geom.kernel + kx) * c;
                    for ch in 0..c {
                        f(row, col + ch, src + ch);
                    }
                }
            }
        }
    }
}
