//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so append order
//! is a valid topological order and `backward` walks the tape in reverse.
//! Gradients are accumulated additively; a tape can be differentiated once,
//! after which it must be [`reset`](Graph::reset).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Abs(Var),
    DwConv {
        x: Var,
        kernel: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Batch extent and (m, k, n) of a matmul between `a` and `b`.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Some((*ba, *m, *k, *n)),
        _ => None,
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(t.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node so the tape can be rebuilt for the next forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.input(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `a[..., n] + b[n]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias).map(|(x, y)| x + y))
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(a, b), &[a, b]))
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = matmul_dims(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape("matmul", self.shape(a), self.shape(b)))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            matmul_acc(
                &va[t * m * k..(t + 1) * m * k],
                &vb[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if self.shape(a).len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` for `x[m,k]`, `w[k,n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for t in 0..batch {
            let base = t * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let v = Tensor::new(new_shape, out)?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    ///
    /// This is the workhorse for every layout change (window partition,
    /// cyclic shift, patch flattening, head split). Indices may repeat; the
    /// backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, index: impl Into<Rc<[usize]>>, shape: &[usize]) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Param(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::Gather(a, index), &[a]))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Param(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, ax, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ax * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let v = Tensor::new(new_shape, out)?;
        Ok(self.push(v, Op::Slice { x: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Param(format!("concat axis {axis} of {base_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reduce `axis` away by summation.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Param(format!("sum_axis {axis} of {shape:?}")));
        }
        let (outer, ax, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..ax {
                let row = &src[(o * ax + t) * inner..(o * ax + t + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let v = Tensor::new(new_shape, out)?;
        Ok(self.push(v, Op::SumAxis { x: a, axis }, &[a]))
    }

    fn check_finite(&self, op: &str, a: Var) -> Result<()> {
        if !self.value(a).all_finite() {
            return Err(Error::Numeric(format!("non-finite input to {op}")));
        }
        Ok(())
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::LogSoftmax(a), &[a]))
    }

    /// Layer normalisation over the last axis followed by `gamma`/`beta`.
    ///
    /// `eps = 0` is accepted; a zero-variance row then raises a numeric error.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Param(format!("layernorm eps must be >= 0, got {eps}")));
        }
        let n = last_dim(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        self.check_finite("layernorm", x)?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::Numeric("layernorm of a constant row with eps = 0".into()));
            }
            let is = 1.0 / denom.sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * std_normal_cdf(x));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    /// Per-channel 2-D cross-correlation of `x[C,H,W]` with `kernel[C,k,k]`,
    /// zero padded so the spatial size is preserved.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let (c, h, w, k) = match (xs.as_slice(), ks.as_slice()) {
            ([c, h, w], [kc, k1, k2]) if c == kc && k1 == k2 => (*c, *h, *w, *k1),
            _ => return Err(Error::shape("depthwise_conv2d", &xs, &ks)),
        };
        if k % 2 == 0 {
            return Err(Error::Param(format!("depthwise kernel size must be odd, got {k}")));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::Param(format!(
                "padding {padding} does not preserve size for kernel {k}"
            )));
        }
        let (src, ker) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let kk = &ker[ch * k * k..(ch + 1) * k * k];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for a in 0..k {
                for b in 0..k {
                    let kv = kk[a * k + b];
                    if kv == 0.0 {
                        continue;
                    }
                    let (da, db) = (a as isize - padding as isize, b as isize - padding as isize);
                    for i in 0..h {
                        let si = i as isize + da;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let (j0, j1) = conv_cols(w, db);
                        let srow = &plane[si as usize * w..(si as usize + 1) * w];
                        let drow = &mut dst[i * w..(i + 1) * w];
                        for j in j0..j1 {
                            drow[j] += kv * srow[(j as isize + db) as usize];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push(v, Op::DwConv { x, kernel }, &[x, kernel]))
    }

    /// L2-normalise each row over the last axis.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite("normalize_rows", a)?;
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::NormalizeRows { x: a, norms }, &[a]))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let a = self.abs(d);
        Ok(self.mean(a))
    }

    /// Mean squared error.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf ends up with a gradient of its own shape
    /// (zeros when the loss does not depend on it). The tape is marked
    /// consumed; a second call without [`reset`](Graph::reset) is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let shape = val(v).shape().to_vec();
                    accumulate(&mut grads[v.0], &shape, |$buf: &mut [f64]| $body);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| add_into(buf, gd));
                acc!(*b, |buf| add_into(buf, gd));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| add_into(buf, gd));
                acc!(*b, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc!(*a, |buf| {
                    for ((o, g), y) in buf.iter_mut().zip(gd).zip(vb) {
                        *o += g * y;
                    }
                });
                acc!(*b, |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(gd).zip(va) {
                        *o += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += c * g)),
            Op::AddRow(a, b) => {
                let n = val(*b).len();
                acc!(*a, |buf| add_into(buf, gd));
                acc!(*b, |buf| {
                    for row in gd.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (batch, m, k, n) =
                    matmul_dims(val(*a).shape(), val(*b).shape()).expect("checked in forward");
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc!(*a, |buf| {
                    for t in 0..batch {
                        let gt = &gd[t * m * n..(t + 1) * m * n];
                        let bt = &vb[t * k * n..(t + 1) * k * n];
                        let ot = &mut buf[t * m * k..(t + 1) * m * k];
                        for r in 0..m {
                            let grow = &gt[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bt[p * n..(p + 1) * n];
                                ot[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                acc!(*b, |buf| {
                    for t in 0..batch {
                        let gt = &gd[t * m * n..(t + 1) * m * n];
                        let at = &va[t * m * k..(t + 1) * m * k];
                        let ot = &mut buf[t * k * n..(t + 1) * k * n];
                        for r in 0..m {
                            let grow = &gt[r * n..(r + 1) * n];
                            for p in 0..k {
                                let a_rp = at[r * k + p];
                                if a_rp == 0.0 {
                                    continue;
                                }
                                for (o, g) in ot[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += a_rp * g;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let shape = node.value.shape();
                let r = shape.len();
                // `g` has the transposed layout [.., cols, rows] relative to `a`.
                let (gr, gc) = (shape[r - 2], shape[r - 1]);
                let batch = shape[..r - 2].iter().product::<usize>();
                acc!(*a, |buf| {
                    for t in 0..batch {
                        let base = t * gr * gc;
                        for i in 0..gr {
                            for j in 0..gc {
                                buf[base + j * gr + i] += gd[base + i * gc + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |buf| add_into(buf, gd)),
            Op::Gather(a, index) => acc!(*a, |buf| {
                for (&src, g) in index.iter().zip(gd) {
                    buf[src] += g;
                }
            }),
            Op::Slice { x, axis, start } => {
                let (outer, ax, inner) = split_at_axis(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                acc!(*x, |buf| {
                    for o in 0..outer {
                        let dst = o * ax * inner + start * inner;
                        add_into(
                            &mut buf[dst..dst + len * inner],
                            &gd[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis] * inner;
                    acc!(p, |buf| {
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            add_into(&mut buf[o * len..(o + 1) * len], &gd[src..src + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc!(*a, |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::SumAxis { x, axis } => {
                let (outer, ax, inner) = split_at_axis(val(*x).shape(), *axis);
                acc!(*x, |buf| {
                    for o in 0..outer {
                        for t in 0..ax {
                            let dst = (o * ax + t) * inner;
                            add_into(&mut buf[dst..dst + inner], &gd[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc!(*a, |buf| {
                    for ((o, yr), gr) in buf.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc!(*a, |buf| {
                    for ((o, yr), gr) in buf.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = val(*gamma).len();
                let gam = val(*gamma).data();
                acc!(*beta, |buf| {
                    for row in gd.chunks(n) {
                        add_into(buf, row);
                    }
                });
                acc!(*gamma, |buf| {
                    for (row, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, g), h) in buf.iter_mut().zip(row).zip(hrow) {
                            *o += g * h;
                        }
                    }
                });
                acc!(*x, |buf| {
                    let nf = n as f64;
                    for (r, ((o, grow), hrow)) in buf
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = grow[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hrow[j];
                        }
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            let d = grow[j] * gam[j];
                            o[j] += scale * (nf * d - sum_d - hrow[j] * sum_dh);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xa = val(*a).data();
                acc!(*a, |buf| {
                    for ((o, g), &x) in buf.iter_mut().zip(gd).zip(xa) {
                        *o += g * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                });
            }
            Op::Abs(a) => {
                let xa = val(*a).data();
                acc!(*a, |buf| {
                    for ((o, g), &x) in buf.iter_mut().zip(gd).zip(xa) {
                        if x > 0.0 {
                            *o += g;
                        } else if x < 0.0 {
                            *o -= g;
                        }
                    }
                });
            }
            Op::DwConv { x, kernel } => {
                let (c, h, w) = match val(*x).shape() {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!("checked in forward"),
                };
                let k = val(*kernel).shape()[1];
                let pad = (k - 1) / 2;
                let (src, ker) = (val(*x).data(), val(*kernel).data());
                acc!(*x, |buf| {
                    for ch in 0..c {
                        let gplane = &gd[ch * h * w..(ch + 1) * h * w];
                        let kk = &ker[ch * k * k..(ch + 1) * k * k];
                        let dst = &mut buf[ch * h * w..(ch + 1) * h * w];
                        for a in 0..k {
                            for b in 0..k {
                                let kv = kk[a * k + b];
                                let (da, db) = (a as isize - pad as isize, b as isize - pad as isize);
                                for i in 0..h {
                                    let si = i as isize + da;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    let (j0, j1) = conv_cols(w, db);
                                    let si = si as usize;
                                    for j in j0..j1 {
                                        dst[si * w + (j as isize + db) as usize] += kv * gplane[i * w + j];
                                    }
                                }
                            }
                        }
                    }
                });
                acc!(*kernel, |buf| {
                    for ch in 0..c {
                        let gplane = &gd[ch * h * w..(ch + 1) * h * w];
                        let plane = &src[ch * h * w..(ch + 1) * h * w];
                        for a in 0..k {
                            for b in 0..k {
                                let (da, db) = (a as isize - pad as isize, b as isize - pad as isize);
                                let mut total = 0.0;
                                for i in 0..h {
                                    let si = i as isize + da;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    let (j0, j1) = conv_cols(w, db);
                                    let si = si as usize;
                                    for j in j0..j1 {
                                        total += gplane[i * w + j] * plane[si * w + (j as isize + db) as usize];
                                    }
                                }
                                buf[ch * k * k + a * k + b] += total;
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc!(*x, |buf| {
                    for (r, ((o, yr), gr)) in
                        buf.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)).enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += (gv - yv * dot) / norms[r];
                        }
                    }
                });
            }
        }
    }
}

/// Output column range whose shifted source column `j + db` lies in `[0, w)`.
fn conv_cols(w: usize, db: isize) -> (usize, usize) {
    let j0 = (-db).max(0) as usize;
    let j1 = (w as isize - db).min(w as isize).max(0) as usize;
    (j0.min(j1), j1)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
