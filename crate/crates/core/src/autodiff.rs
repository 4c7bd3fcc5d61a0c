//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order. [`Tape::backward`] walks the record in exact reverse
//! order and accumulates gradients into the leaves that were registered with
//! `requires_grad`. Intermediate gradients live in a scratch buffer that is
//! discarded after each pass, so calling `backward` twice on the same tape
//! doubles the leaf gradients and nothing else.
//!
//! Only the operations needed by a small MLP classifier and the training
//! losses are provided: matrix products, elementwise arithmetic, row-wise
//! bias broadcast, row-wise log-softmax, clamping and full reduction.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Dense row-major tensor of `f64` values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    ClampMin(Var, f64),
    LogSoftmaxRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// Plain `m×k · k×n` product on row-major buffers.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
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

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradients accumulate into it when `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant leaf; no gradient
    /// flows back through the copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Tensor {
            shape: self.nodes[v.0].tensor.shape.clone(),
            values: self.nodes[v.0].tensor.values.clone(),
            grad: None,
            requires_grad: false,
        };
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.values, &tb.values, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            needs,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape != tb.shape {
            return Err(dim_err(name, ta, tb));
        }
        let values = ta.values.iter().zip(&tb.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, values)?, op, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].tensor;
        let t = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| f(x)).collect(),
            grad: None,
            requires_grad: false,
        };
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with inputs in `(0, LOG_EPS)` clamped up to `LOG_EPS`.
    /// Non-positive inputs are rejected.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].tensor.values.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, |x| x.max(LOG_EPS).ln(), Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// Elementwise `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[bias.0].tensor);
        if ta.shape.len() != 2 || tb.values.len() != ta.shape[1] {
            return Err(dim_err("add_row_bias", ta, tb));
        }
        let n = ta.shape[1];
        let values = ta
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.values[i % n])
            .collect();
        let shape = ta.shape.clone();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, values)?, Op::AddRowBias(a, bias), needs))
    }

    /// Row-wise `x - logsumexp(x)` computed with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        if ta.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "log_softmax_rows",
                left: ta.shape.clone(),
                right: vec![],
            });
        }
        if !ta.is_finite() {
            return Err(Error::Numeric("log_softmax_rows"));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.values[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                values[i * n + j] = row[j] - lse;
            }
        }
        let shape = ta.shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, values)?, Op::LogSoftmaxRows(a), needs))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].tensor.values.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].tensor.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Propagates d(loss)/d(node) back to every reachable leaf that requires
    /// gradients. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[idx].tensor.accumulate_grad(&g)?;
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].tensor;
                    let tb = &self.nodes[b.0].tensor;
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.needs(a) {
                        let bt = transpose(&tb.values, k, n);
                        let ga = matmul_raw(&g, &bt, m, n, k);
                        add_into(&mut grads[a.0], &ga);
                    }
                    if self.needs(b) {
                        let ta = &self.nodes[a.0].tensor;
                        let at = transpose(&ta.values, m, k);
                        let gb = matmul_raw(&at, &g, k, m, n);
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if self.needs(b) {
                        add_into(&mut grads[b.0], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        add_into(&mut grads[b.0], &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let tb = &self.nodes[b.0].tensor.values;
                        let ga: Vec<f64> = g.iter().zip(tb).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[a.0], &ga);
                    }
                    if self.needs(b) {
                        let ta = &self.nodes[a.0].tensor.values;
                        let gb: Vec<f64> = g.iter().zip(ta).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].tensor.values;
                    let ga: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Log(a) => {
                    let inp = &self.nodes[a.0].tensor.values;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(inp)
                        .map(|(x, &y)| if y < LOG_EPS { 0.0 } else { x / y })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Relu(a) => {
                    let inp = &self.nodes[a.0].tensor.values;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(inp)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::ClampMin(a, lo) => {
                    let inp = &self.nodes[a.0].tensor.values;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(inp)
                        .map(|(x, &y)| if y > lo { *x } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::AddRowBias(a, bias) => {
                    if self.needs(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if self.needs(bias) {
                        let n = self.nodes[bias.0].tensor.len();
                        let mut gb = vec![0.0; n];
                        for (i, x) in g.iter().enumerate() {
                            gb[i % n] += x;
                        }
                        add_into(&mut grads[bias.0], &gb);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let out = &self.nodes[idx].tensor;
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let gs: f64 = g[i * n..(i + 1) * n].iter().sum();
                        for j in 0..n {
                            let p = out.values[i * n + j].exp();
                            ga[i * n + j] = g[i * n + j] - p * gs;
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].tensor.len();
                    add_into(&mut grads[a.0], &vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g.to_vec()),
    }
}

/// Plain gradient descent: `p <- p - lr * grad`, then clears the gradient.
pub fn sgd_step(params: &mut [Tensor], lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::param("lr", format!("must be finite and non-negative, got {lr}")));
    }
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        for (v, d) in p.values.iter_mut().zip(&g) {
            *v -= lr * d;
        }
    }
    Ok(())
}
