//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs. Because a node can only reference nodes that already exist,
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Pow(Var, f64),
    SoftmaxRows(Var),
    Conv1d {
        input: Var,
        kernels: Var,
        stride: usize,
        patches: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        index: usize,
    },
    StackRows(Vec<Var>),
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a trainable leaf; `backward` fills its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, needs_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let node = &self.nodes[v.0];
        node.value
            .grad()
            .or_else(|| self.grads.get(v.0).and_then(|g| g.as_deref()))
    }

    /// Gradient as a tensor shaped like `v`, zeros where `v` was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match self.grad(v) {
            Some(g) => Tensor::from_parts(value.shape().to_vec(), g.to_vec()),
            None => Tensor::zeros(value.shape()),
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(value.shape().to_vec(), data);
        self.push(out, op, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_t inner dimensions differ: {m}x{k} * ({n}x{k2})^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::shape(format!(
                "bias of {} values for {n} columns",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(x, bias), "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), "add_scalar", |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    /// Natural log; inputs are floored at the smallest positive normal.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Ln(x), "ln", |v| v.max(f64::MIN_POSITIVE).ln())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::param(format!("empty clamp range {lo}..{hi}")));
        }
        self.map(x, Op::Clamp(x, lo, hi), "clamp", |v| v.clamp(lo, hi))
    }

    /// `x^e` for nonnegative `x`.
    pub fn pow(&mut self, x: Var, e: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::param("pow requires nonnegative inputs"));
        }
        self.map(x, Op::Pow(x, e), "pow", |v| v.powf(e))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::SoftmaxRows(x), "softmax_rows")
    }

    /// 1-D cross-correlation over time with zero "same" padding.
    ///
    /// `input` is `T×C_in`, `kernels` is `C_out×C_in×k` with odd `k`; the
    /// output has `ceil(T/stride)` rows.
    pub fn conv1d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (t, c_in) = self.dims2(input)?;
        let (c_out, kc_in, k) = match self.value(kernels).shape() {
            &[a, b, c] => (a, b, c),
            s => return Err(Error::shape(format!("conv kernels must be rank 3, got {s:?}"))),
        };
        if t == 0 {
            return Err(Error::EmptyInput("conv1d input has no frames"));
        }
        if kc_in != c_in {
            return Err(Error::shape(format!(
                "conv kernels expect {kc_in} input channels, got {c_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::param(format!("conv kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::param("conv stride must be at least 1"));
        }
        let t_out = t.div_ceil(stride);
        let patches = im2col(self.value(input).data(), t, c_in, k, stride, t_out);
        let width = c_in * k;
        let mut out = vec![0.0; t_out * c_out];
        gemm_nt(t_out, width, c_out, &patches, self.value(kernels).data(), &mut out);
        self.push(
            Tensor::from_parts(vec![t_out, c_out], out),
            Op::Conv1d {
                input,
                kernels,
                stride,
                patches,
            },
            "conv1d",
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(Error::shape(format!("column range {start}..{end} of {n}")));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        self.push(
            Tensor::from_parts(vec![m, w], data),
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    /// Row `index` of a matrix, as a `1×n` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if index >= m {
            return Err(Error::shape(format!("row {index} of {m}")));
        }
        let data = self.value(x).row(index).to_vec();
        self.push(Tensor::from_parts(vec![1, n], data), Op::Row { x, index }, "row")
    }

    /// Stacks `1×n` rows into a `len×n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::EmptyInput("stack_rows"))?;
        let n = self.value(*first).numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let v = self.value(r);
            if v.numel() != n {
                return Err(Error::shape("stack_rows: rows differ in width"));
            }
            data.extend_from_slice(v.data());
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), n], data),
            Op::StackRows(rows.to_vec()),
            "stack_rows",
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.is_empty() {
            return Err(Error::EmptyInput("mse"));
        }
        let sum: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(sum / va.numel() as f64);
        self.push(out, Op::Mse(a, b), "mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Populates gradients of the scalar `loss` with respect to every node it
    /// depends on. Parameter leaves get the gradient stored on their tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }

        for (node, grad) in self.nodes.iter_mut().zip(&mut self.grads) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                let g = grad.take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}

struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn elementwise(&mut self, x: Var, g: &[f64], local: impl Fn(usize) -> f64) {
        self.accumulate(x, |acc| {
            for (i, (a, gv)) in acc.iter_mut().zip(g).enumerate() {
                *a += gv * local(i);
            }
        });
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let mut sink = GradSink { nodes, grads };
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let n = nodes[b.0].value.shape()[1];
            if sink.wants(a) {
                let bv = nodes[b.0].value.data();
                sink.accumulate(a, |acc| gemm_nt(m, n, k, g, bv, acc));
            }
            if sink.wants(b) {
                let av = nodes[a.0].value.data();
                sink.accumulate(b, |acc| gemm_tn(k, m, n, av, g, acc));
            }
        }
        &Op::MatMulT(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let n = nodes[b.0].value.shape()[0];
            if sink.wants(a) {
                let bv = nodes[b.0].value.data();
                sink.accumulate(a, |acc| gemm_nn(m, n, k, g, bv, acc));
            }
            if sink.wants(b) {
                let av = nodes[a.0].value.data();
                sink.accumulate(b, |acc| gemm_tn(n, m, k, g, av, acc));
            }
        }
        &Op::Add(a, b) => {
            sink.elementwise(a, g, |_| 1.0);
            sink.elementwise(b, g, |_| 1.0);
        }
        &Op::Sub(a, b) => {
            sink.elementwise(a, g, |_| 1.0);
            sink.elementwise(b, g, |_| -1.0);
        }
        &Op::Mul(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            sink.elementwise(a, g, |j| bv[j]);
            sink.elementwise(b, g, |j| av[j]);
        }
        &Op::AddRow(x, bias) => {
            sink.elementwise(x, g, |_| 1.0);
            let n = nodes[bias.0].value.numel();
            sink.accumulate(bias, |acc| {
                for row in g.chunks_exact(n) {
                    for (a, gv) in acc.iter_mut().zip(row) {
                        *a += gv;
                    }
                }
            });
        }
        &Op::Scale(x, c) => sink.elementwise(x, g, |_| c),
        &Op::AddScalar(x) => sink.elementwise(x, g, |_| 1.0),
        &Op::Sigmoid(x) => {
            let y = out.data();
            sink.elementwise(x, g, |j| y[j] * (1.0 - y[j]));
        }
        &Op::Tanh(x) => {
            let y = out.data();
            sink.elementwise(x, g, |j| 1.0 - y[j] * y[j]);
        }
        &Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            sink.elementwise(x, g, |j| if xv[j] > 0.0 { 1.0 } else { 0.0 });
        }
        &Op::Ln(x) => {
            let xv = nodes[x.0].value.data();
            sink.elementwise(x, g, |j| 1.0 / xv[j].max(f64::MIN_POSITIVE));
        }
        &Op::Clamp(x, lo, hi) => {
            let xv = nodes[x.0].value.data();
            sink.elementwise(x, g, |j| if xv[j] >= lo && xv[j] <= hi { 1.0 } else { 0.0 });
        }
        &Op::Pow(x, e) => {
            let xv = nodes[x.0].value.data();
            sink.elementwise(x, g, |j| {
                if e == 0.0 || (xv[j] == 0.0 && e < 1.0) {
                    0.0
                } else {
                    e * xv[j].powf(e - 1.0)
                }
            });
        }
        &Op::SoftmaxRows(x) => {
            let y = out.data();
            let n = out.shape()[1];
            sink.accumulate(x, |acc| {
                for ((a_row, y_row), g_row) in acc.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let inner = dot(y_row, g_row);
                    for ((a, yv), gv) in a_row.iter_mut().zip(y_row).zip(g_row) {
                        *a += yv * (gv - inner);
                    }
                }
            });
        }
        Op::Conv1d {
            input,
            kernels,
            stride,
            patches,
        } => {
            let (input, kernels, stride) = (*input, *kernels, *stride);
            let (t, c_in) = nodes[input.0].value.dims2().unwrap();
            let shape = nodes[kernels.0].value.shape().to_vec();
            let (c_out, k) = (shape[0], shape[2]);
            let t_out = out.shape()[0];
            let width = c_in * k;
            sink.accumulate(kernels, |acc| gemm_tn(c_out, t_out, width, g, patches, acc));
            if sink.wants(input) {
                let w = nodes[kernels.0].value.data();
                let mut d_patches = vec![0.0; t_out * width];
                gemm_nn(t_out, c_out, width, g, w, &mut d_patches);
                sink.accumulate(input, |acc| col2im_add(&d_patches, acc, t, c_in, k, stride, t_out));
            }
        }
        &Op::SliceCols { x, start } => {
            let n = nodes[x.0].value.shape()[1];
            let w = out.shape()[1];
            sink.accumulate(x, |acc| {
                for (r, g_row) in g.chunks_exact(w).enumerate() {
                    for (a, gv) in acc[r * n + start..r * n + start + w].iter_mut().zip(g_row) {
                        *a += gv;
                    }
                }
            });
        }
        &Op::Row { x, index } => {
            let n = g.len();
            sink.accumulate(x, |acc| {
                for (a, gv) in acc[index * n..(index + 1) * n].iter_mut().zip(g) {
                    *a += gv;
                }
            });
        }
        Op::StackRows(rows) => {
            let n = out.shape()[1];
            for (r, &row) in rows.iter().enumerate() {
                sink.elementwise(row, &g[r * n..(r + 1) * n], |_| 1.0);
            }
        }
        &Op::Mse(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let scale = 2.0 * g[0] / av.len() as f64;
            sink.accumulate(a, |acc| {
                for ((o, x), y) in acc.iter_mut().zip(av).zip(bv) {
                    *o += scale * (x - y);
                }
            });
            sink.accumulate(b, |acc| {
                for ((o, x), y) in acc.iter_mut().zip(av).zip(bv) {
                    *o -= scale * (x - y);
                }
            });
        }
        &Op::Sum(x) => {
            let gv = g[0];
            sink.accumulate(x, |acc| acc.iter_mut().for_each(|a| *a += gv));
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        &Op::MatMul(a, b)
        | &Op::MatMulT(a, b)
        | &Op::Add(a, b)
        | &Op::Sub(a, b)
        | &Op::Mul(a, b)
        | &Op::AddRow(a, b)
        | &Op::Mse(a, b) => vec![a, b],
        &Op::Scale(x, _)
        | &Op::AddScalar(x)
        | &Op::Sigmoid(x)
        | &Op::Tanh(x)
        | &Op::Relu(x)
        | &Op::Ln(x)
        | &Op::Clamp(x, ..)
        | &Op::Pow(x, _)
        | &Op::SoftmaxRows(x)
        | &Op::Sum(x)
        | &Op::SliceCols { x, .. }
        | &Op::Row { x, .. } => vec![x],
        Op::Conv1d { input, kernels, .. } => vec![*input, *kernels],
        Op::StackRows(rows) => rows.clone(),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Softmax over each row of a matrix, off-tape.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (_, n) = m.dims2()?;
    let mut out = m.clone();
    out.clear_grad();
    for row in out.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

fn im2col(input: &[f64], t: usize, c_in: usize, k: usize, stride: usize, t_out: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let width = c_in * k;
    let mut patches = vec![0.0; t_out * width];
    for o in 0..t_out {
        let row = &mut patches[o * width..(o + 1) * width];
        for j in 0..k {
            let Some(src) = (o * stride + j).checked_sub(pad).filter(|&s| s < t) else {
                continue;
            };
            for ci in 0..c_in {
                row[ci * k + j] = input[src * c_in + ci];
            }
        }
    }
    patches
}

fn col2im_add(d_patches: &[f64], acc: &mut [f64], t: usize, c_in: usize, k: usize, stride: usize, t_out: usize) {
    let pad = (k - 1) / 2;
    let width = c_in * k;
    for o in 0..t_out {
        let row = &d_patches[o * width..(o + 1) * width];
        for j in 0..k {
            let Some(src) = (o * stride + j).checked_sub(pad).filter(|&s| s < t) else {
                continue;
            };
            for ci in 0..c_in {
                acc[src * c_in + ci] += row[ci * k + j];
            }
        }
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn numeric_gradient<F>(f: &F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::param(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Reverse-mode gradient of `f` at `params`.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars.iter().map(|&v| tape.grad_tensor(v)).collect())
}

/// `max |analytic − numeric| / max(1, |numeric|)` over all elements.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::shape("gradient lists differ in length"));
    }
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::shape("gradient shapes differ"));
        }
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the worst relative error.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let numeric = numeric_gradient(&f, params, eps)?;
    let analytic = analytic_gradient(&f, params)?;
    max_relative_error(&analytic, &numeric)
}
