//! The recording tape and every differentiable primitive.
//!
//! Values are computed eagerly when an op is recorded. Each node keeps enough
//! of its forward state to run its own pullback, and nodes are appended in
//! execution order, so a reverse sweep over the node list is a valid
//! topological traversal.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

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
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { input: Var, weight: Var },
    ConvTranspose2 { input: Var, weight: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Mean(Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Silu(Var),
    Sigmoid(Var),
    CrossEntropy { logits: Var, target: Tensor, mask: Vec<bool>, probs: Vec<f64> },
    BceWithLogits { logits: Var, target: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_into(x: &[f64], out: &mut [f64], outer: usize, n: usize, inner: usize, log: bool) {
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                max = max.max(x[idx(i)]);
            }
            let mut total = 0.0;
            for i in 0..n {
                total += (x[idx(i)] - max).exp();
            }
            if log {
                let lse = max + total.ln();
                for i in 0..n {
                    out[idx(i)] = x[idx(i)] - lse;
                }
            } else {
                for i in 0..n {
                    out[idx(i)] = (x[idx(i)] - max).exp() / total;
                }
            }
        }
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

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Leaves created with `requires_grad` always have one after backward
    /// (zeros when the loss does not depend on them).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Drops every node recorded after the first `len`, and all gradients.
    ///
    /// Lets a tape with parameters bound at the front be reused across steps.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.zero_grad();
    }

    /// Overwrites the value of a leaf in place.
    pub fn set_leaf(&mut self, v: Var, data: &[f64]) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::invalid("set_leaf", "variable is not a leaf"));
        }
        if node.value.len() != data.len() {
            return Err(TensorError::shape("set_leaf", node.value.shape(), &[data.len()]));
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::invalid(op, format!("expected a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, rec, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds `bias[c]` to every element of row `c` of a `[C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let channels = sx[0];
        if self.value(bias).len() != channels {
            return Err(TensorError::shape("add_bias", sx, self.shape(bias)));
        }
        let inner = self.value(x).len() / channels.max(1);
        let vx = self.value(x);
        let vb = self.value(bias).data();
        let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] + vb[i / inner]);
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let va = self.value(a).data();
        let out = Tensor::from_fn(&[n, m], |i| va[(i % m) * n + i / m]);
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(TensorError::shape("reshape", va.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Same-padded 1-D convolution of `input [C_in, L]` with `weight [C_out, C_in, k]`, `k` odd.
    pub fn conv1d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (cin, len) = self.dims2("conv1d", input)?;
        let ws = self.shape(weight);
        if ws.len() != 3 || ws[1] != cin || ws[2] % 2 == 0 {
            return Err(TensorError::shape("conv1d", self.shape(input), ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        let pad = k / 2;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            let orow = &mut out[o * len..(o + 1) * len];
            for i in 0..cin {
                let xrow = &x[i * len..(i + 1) * len];
                for tap in 0..k {
                    let wv = w[(o * cin + i) * k + tap];
                    if wv == 0.0 {
                        continue;
                    }
                    // out[l] += w * x[l + tap - pad]
                    let (lo, hi) = tap_range(tap, pad, len);
                    let shift = tap as isize - pad as isize;
                    let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (dst, &s) in orow[lo..hi].iter_mut().zip(src) {
                        *dst += wv * s;
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, len], out)?;
        Ok(self.push(out, Op::Conv1d { input, weight }, &[input, weight]))
    }

    /// Stride-2 transposed convolution with kernel width 2: `input [C_in, L]`,
    /// `weight [C_in, C_out, 2]` to `[C_out, 2L]`.
    pub fn conv_transpose2(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (cin, len) = self.dims2("conv_transpose2", input)?;
        let ws = self.shape(weight);
        if ws.len() != 3 || ws[0] != cin || ws[2] != 2 {
            return Err(TensorError::shape("conv_transpose2", self.shape(input), ws));
        }
        let cout = ws[1];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; cout * 2 * len];
        for i in 0..cin {
            for o in 0..cout {
                let w0 = w[(i * cout + o) * 2];
                let w1 = w[(i * cout + o) * 2 + 1];
                for l in 0..len {
                    let xv = x[i * len + l];
                    out[o * 2 * len + 2 * l] += xv * w0;
                    out[o * 2 * len + 2 * l + 1] += xv * w1;
                }
            }
        }
        let out = Tensor::new(vec![cout, 2 * len], out)?;
        Ok(self.push(out, Op::ConvTranspose2 { input, weight }, &[input, weight]))
    }

    /// Width-2, stride-2 max pooling along the length axis of `[C, L]`.
    pub fn maxpool1d(&mut self, input: Var) -> Result<Var> {
        let (c, len) = self.dims2("maxpool1d", input)?;
        if len % 2 != 0 {
            return Err(TensorError::invalid("maxpool1d", format!("length {len} is odd")));
        }
        let half = len / 2;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * half);
        let mut argmax = Vec::with_capacity(c * half);
        for ch in 0..c {
            for l in 0..half {
                let a = ch * len + 2 * l;
                // ties go to the left element
                let idx = if x[a + 1] > x[a] { a + 1 } else { a };
                out.push(x[idx]);
                argmax.push(idx);
            }
        }
        let out = Tensor::new(vec![c, half], out)?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Nearest-neighbour upsampling by 2 along the length axis of `[C, L]`.
    pub fn upsample1d(&mut self, input: Var) -> Result<Var> {
        let (c, len) = self.dims2("upsample1d", input)?;
        let x = self.value(input).data();
        let out = Tensor::from_fn(&[c, 2 * len], |i| {
            let (ch, l) = (i / (2 * len), i % (2 * len));
            x[ch * len + l / 2]
        });
        Ok(self.push(out, Op::Upsample2(input), &[input]))
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(TensorError::invalid(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", input, axis)?;
        let vx = self.value(input);
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![0.0; vx.len()];
        softmax_into(vx.data(), &mut out, outer, n, inner, false);
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { input, axis }, &[input]))
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", input, axis)?;
        let vx = self.value(input);
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![0.0; vx.len()];
        softmax_into(vx.data(), &mut out, outer, n, inner, true);
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax { input, axis }, &[input]))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let vx = self.value(input);
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(input), &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(shape, out)?;
        let parents = inputs.to_vec();
        Ok(self.push(out, Op::Concat { inputs: parents.clone(), axis }, &parents))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", input, axis)?;
        let vx = self.value(input);
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        if start >= end || end > n {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} invalid for axis of length {n}"),
            ));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = width;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Slice { input, axis, start }, &[input]))
    }

    pub fn silu(&mut self, input: Var) -> Var {
        let vx = self.value(input);
        let out = Tensor::from_fn(vx.shape(), |i| {
            let x = vx.data()[i];
            x * sigmoid(x)
        });
        self.push(out, Op::Silu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let vx = self.value(input);
        let out = Tensor::from_fn(vx.shape(), |i| sigmoid(vx.data()[i]));
        self.push(out, Op::Sigmoid(input), &[input])
    }

    /// Masked categorical cross entropy over the columns of `logits [K, T]`.
    ///
    /// Returns the mean over selected columns of `-sum_j target[j] * log_softmax(logits)[j]`.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let (k, t) = self.dims2("cross_entropy", logits)?;
        if target.shape() != self.shape(logits) {
            return Err(TensorError::shape("cross_entropy", self.shape(logits), target.shape()));
        }
        if mask.len() != t {
            return Err(TensorError::shape("cross_entropy", &[t], &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let x = self.value(logits).data();
        let mut logp = vec![0.0; k * t];
        softmax_into(x, &mut logp, 1, k, t, true);
        let mut loss = 0.0;
        for col in (0..t).filter(|&c| mask[c]) {
            for row in 0..k {
                let q = target.data()[row * t + col];
                if q != 0.0 {
                    loss -= q * logp[row * t + col];
                }
            }
        }
        loss /= count as f64;
        let probs = logp.iter().map(|lp| lp.exp()).collect();
        let op = Op::CrossEntropy {
            logits,
            target: target.clone(),
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Element-wise binary cross entropy on logits, averaged over all entries.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if target.shape() != self.shape(logits) {
            return Err(TensorError::shape("bce_with_logits", self.shape(logits), target.shape()));
        }
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(target.data())
            .map(|(&x, &q)| x.max(0.0) - q * x + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            logits,
            target: target.clone(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (before, _) = grads.split_at_mut(i);
            self.pullback(i, &g, before);
            grads[i] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn pullback(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let len = |v: Var| nodes[v.0].value.len();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], len(*b), |gb| {
                        gb.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s)
                    });
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                            *d += s * y;
                        }
                    });
                }
                if needs(*b) {
                    let va = val(*a);
                    accumulate(&mut grads[b.0], len(*b), |gb| {
                        for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                            *d += s * x;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s)
                    });
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], len(*x), |gx| {
                        gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                    });
                }
                if needs(*b) {
                    let channels = len(*b);
                    let inner = g.len() / channels.max(1);
                    accumulate(&mut grads[b.0], channels, |gb| {
                        for (c, d) in gb.iter_mut().enumerate() {
                            *d += g[c * inner..(c + 1) * inner].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if needs(*a) {
                    // dA = G B^T
                    let vb = val(*b);
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let brow = &vb[c * n..(c + 1) * n];
                                ga[r * k + c] += dot(grow, brow);
                            }
                        }
                    });
                }
                if needs(*b) {
                    // dB = A^T G
                    let va = val(*a);
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let av = va[r * k + c];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, &s) in gb[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                    *d += av * s;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    accumulate(&mut grads[a.0], m * n, |ga| {
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] += g[c * m + r];
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                    });
                }
            }
            Op::Conv1d { input, weight } => {
                let (cin, l) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                let ws = nodes[weight.0].value.shape();
                let (cout, k) = (ws[0], ws[2]);
                let pad = k / 2;
                let x = val(*input);
                let w = val(*weight);
                if needs(*input) {
                    accumulate(&mut grads[input.0], cin * l, |gx| {
                        for o in 0..cout {
                            let grow = &g[o * l..(o + 1) * l];
                            for i in 0..cin {
                                for tap in 0..k {
                                    let wv = w[(o * cin + i) * k + tap];
                                    let (lo, hi) = tap_range(tap, pad, l);
                                    let shift = tap as isize - pad as isize;
                                    let base = i * l;
                                    let dst = &mut gx[(base as isize + lo as isize + shift) as usize
                                        ..(base as isize + hi as isize + shift) as usize];
                                    for (d, &s) in dst.iter_mut().zip(&grow[lo..hi]) {
                                        *d += wv * s;
                                    }
                                }
                            }
                        }
                    });
                }
                if needs(*weight) {
                    accumulate(&mut grads[weight.0], cout * cin * k, |gw| {
                        for o in 0..cout {
                            let grow = &g[o * l..(o + 1) * l];
                            for i in 0..cin {
                                let xrow = &x[i * l..(i + 1) * l];
                                for tap in 0..k {
                                    let (lo, hi) = tap_range(tap, pad, l);
                                    let shift = tap as isize - pad as isize;
                                    let src = &xrow[(lo as isize + shift) as usize
                                        ..(hi as isize + shift) as usize];
                                    gw[(o * cin + i) * k + tap] += dot(&grow[lo..hi], src);
                                }
                            }
                        }
                    });
                }
            }
            Op::ConvTranspose2 { input, weight } => {
                let (cin, l) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                let cout = nodes[weight.0].value.shape()[1];
                let x = val(*input);
                let w = val(*weight);
                if needs(*input) {
                    accumulate(&mut grads[input.0], cin * l, |gx| {
                        for i in 0..cin {
                            for o in 0..cout {
                                let w0 = w[(i * cout + o) * 2];
                                let w1 = w[(i * cout + o) * 2 + 1];
                                for p in 0..l {
                                    gx[i * l + p] += w0 * g[o * 2 * l + 2 * p]
                                        + w1 * g[o * 2 * l + 2 * p + 1];
                                }
                            }
                        }
                    });
                }
                if needs(*weight) {
                    accumulate(&mut grads[weight.0], cin * cout * 2, |gw| {
                        for i in 0..cin {
                            for o in 0..cout {
                                let (mut s0, mut s1) = (0.0, 0.0);
                                for p in 0..l {
                                    s0 += x[i * l + p] * g[o * 2 * l + 2 * p];
                                    s1 += x[i * l + p] * g[o * 2 * l + 2 * p + 1];
                                }
                                gw[(i * cout + o) * 2] += s0;
                                gw[(i * cout + o) * 2 + 1] += s1;
                            }
                        }
                    });
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if needs(*input) {
                    accumulate(&mut grads[input.0], len(*input), |gx| {
                        for (&idx, &s) in argmax.iter().zip(g) {
                            gx[idx] += s;
                        }
                    });
                }
            }
            Op::Upsample2(input) => {
                if needs(*input) {
                    accumulate(&mut grads[input.0], len(*input), |gx| {
                        for (j, &s) in g.iter().enumerate() {
                            gx[j / 2] += s;
                        }
                    });
                }
            }
            Op::Softmax { input, axis } => {
                if needs(*input) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    accumulate(&mut grads[input.0], len(*input), |gx| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |r: usize| (o * n + r) * inner + j;
                                let dotp: f64 = (0..n).map(|r| g[idx(r)] * y[idx(r)]).sum();
                                for r in 0..n {
                                    gx[idx(r)] += y[idx(r)] * (g[idx(r)] - dotp);
                                }
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax { input, axis } => {
                if needs(*input) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    accumulate(&mut grads[input.0], len(*input), |gx| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |r: usize| (o * n + r) * inner + j;
                                let total: f64 = (0..n).map(|r| g[idx(r)]).sum();
                                for r in 0..n {
                                    gx[idx(r)] += g[idx(r)] - y[idx(r)].exp() * total;
                                }
                            }
                        }
                    });
                }
            }
            Op::Mean(input) => {
                if needs(*input) {
                    let n = len(*input);
                    let s = g[0] / n as f64;
                    accumulate(&mut grads[input.0], n, |gx| gx.iter_mut().for_each(|d| *d += s));
                }
            }
            Op::Sum(input) => {
                if needs(*input) {
                    let s = g[0];
                    accumulate(&mut grads[input.0], len(*input), |gx| {
                        gx.iter_mut().for_each(|d| *d += s)
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis];
                for &v in inputs {
                    let n = nodes[v.0].value.shape()[*axis];
                    if needs(v) {
                        accumulate(&mut grads[v.0], len(v), |gv| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                for (d, &s) in gv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                if needs(*input) {
                    let (outer, n, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                    let width = out.shape()[*axis];
                    accumulate(&mut grads[input.0], len(*input), |gx| {
                        for o in 0..outer {
                            let dst = &mut gx[(o * n + start) * inner..(o * n + start + width) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * width * inner..(o + 1) * width * inner]) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Silu(input) => {
                if needs(*input) {
                    let x = val(*input);
                    accumulate(&mut grads[input.0], x.len(), |gx| {
                        for ((d, &s), &xv) in gx.iter_mut().zip(g).zip(x) {
                            let sg = sigmoid(xv);
                            *d += s * (sg + xv * sg * (1.0 - sg));
                        }
                    });
                }
            }
            Op::Sigmoid(input) => {
                if needs(*input) {
                    let y = out.data();
                    accumulate(&mut grads[input.0], y.len(), |gx| {
                        for ((d, &s), &yv) in gx.iter_mut().zip(g).zip(y) {
                            *d += s * yv * (1.0 - yv);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, target, mask, probs } => {
                if needs(*logits) {
                    let (k, t) = (target.shape()[0], target.shape()[1]);
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let s = g[0] / count;
                    let q = target.data();
                    accumulate(&mut grads[logits.0], k * t, |gx| {
                        for col in (0..t).filter(|&c| mask[c]) {
                            let mass: f64 = (0..k).map(|r| q[r * t + col]).sum();
                            for r in 0..k {
                                let idx = r * t + col;
                                gx[idx] += s * (mass * probs[idx] - q[idx]);
                            }
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, target } => {
                if needs(*logits) {
                    let x = val(*logits);
                    let s = g[0] / x.len() as f64;
                    accumulate(&mut grads[logits.0], x.len(), |gx| {
                        for ((d, &xv), &q) in gx.iter_mut().zip(x).zip(target.data()) {
                            *d += s * (sigmoid(xv) - q);
                        }
                    });
                }
            }
        }
    }
}

/// Output positions `lo..hi` for which `l + tap - pad` lies inside `0..len`.
fn tap_range(tap: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    (lo, hi.max(lo))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (d, &bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *d += av * bv;
            }
        }
    }
}
