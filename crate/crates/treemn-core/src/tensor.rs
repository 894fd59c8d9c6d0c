//! Dense vector/matrix values with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass into a
//! Wengert list; [`Tape::backward`] replays the list in reverse and
//! accumulates gradients into per-value buffers. Values are flat `f64`
//! storage plus a shape, addressed through copyable [`Value`] handles.
//! Gradients accumulate with `+=`, so a parameter registered once and used
//! at many sites (every shared weight in a tree) collects the sum of all
//! its contributions.

use std::fmt;

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes do not conform for the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An op that requires at least one element got none.
    Empty { op: &'static str },
    /// `backward` was called on a value that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// An index argument is out of range for the named op.
    BadIndex {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::Empty { op } => write!(f, "{op}: empty input"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be a scalar, got shape {shape:?}")
            }
            TensorError::BadIndex { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Plain dense storage: a shape and row-major `f64` data, with an optional
/// gradient buffer of the same shape.
///
/// `Tensor` is the at-rest form used by parameter stores and checkpoints;
/// computation happens on a [`Tape`] after registering the tensor with
/// [`Tape::param`]. Equality compares shape and data, not gradients.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulated gradient, if any backward pass has deposited one.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated to zeros on first use. Same shape as data.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

struct Slot {
    data: Vec<f64>,
    grad: Vec<f64>,
    shape: Vec<usize>,
}

enum Op {
    /// out = M . x
    MatVec { m: Value, x: Value, out: Value },
    /// out[t,:] = W . v[t,:]
    RowsMatVec { w: Value, v: Value, out: Value },
    /// out[t,:] = m[t,:] + x
    AddRows { m: Value, x: Value, out: Value },
    Add { a: Value, b: Value, out: Value },
    /// Elementwise product.
    Mul { a: Value, b: Value, out: Value },
    Scale { a: Value, c: f64, out: Value },
    Tanh { x: Value, out: Value },
    Sigmoid { x: Value, out: Value },
    Softmax { x: Value, out: Value },
    Dot { a: Value, b: Value, out: Value },
    /// out[k] = sum_t p[t] * v[t,k]
    WeightedRowSum { p: Value, v: Value, out: Value },
    Concat { a: Value, b: Value, out: Value },
    Slice { x: Value, start: usize, out: Value },
    StackRows { rows: Vec<Value>, out: Value },
    Sum { x: Value, out: Value },
    /// out = logsumexp(logits) - logits[target]
    CrossEntropyLogits { logits: Value, target: usize, out: Value },
}

/// Wengert list recording one forward trace.
///
/// Single-threaded by design: each sample gets a private tape and gradient
/// buffers are merged at batch boundaries.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        self.slots.push(Slot { data, grad, shape });
        Value(self.slots.len() - 1)
    }

    /// Registers an untraced leaf value (an input or constant).
    pub fn input(&mut self, shape: &[usize], data: &[f64]) -> Result<Value, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "input",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data.to_vec()))
    }

    pub fn vector_input(&mut self, data: &[f64]) -> Value {
        self.push(vec![data.len()], data.to_vec())
    }

    /// Registers a parameter tensor as a leaf. The tape holds a copy; after
    /// [`Tape::backward`] the gradient is read back via [`Tape::grad`].
    pub fn param(&mut self, t: &Tensor) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn value(&self, v: Value) -> &[f64] {
        &self.slots[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn grad(&self, v: Value) -> &[f64] {
        &self.slots[v.0].grad
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn dims2(&self, v: Value) -> Option<(usize, usize)> {
        match self.slots[v.0].shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    fn len1(&self, v: Value) -> Option<usize> {
        match self.slots[v.0].shape.as_slice() {
            &[n] => Some(n),
            _ => None,
        }
    }

    fn mismatch(&self, op: &'static str, a: Value, b: Value) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.slots[a.0].shape.clone(),
            rhs: self.slots[b.0].shape.clone(),
        }
    }

    /// Matrix-vector product: `[r x c] . [c] -> [r]`.
    pub fn matvec(&mut self, m: Value, x: Value) -> Result<Value, TensorError> {
        let (r, c) = self
            .dims2(m)
            .ok_or_else(|| self.mismatch("matvec", m, x))?;
        if self.len1(x) != Some(c) {
            return Err(self.mismatch("matvec", m, x));
        }
        let md = &self.slots[m.0].data;
        let xd = &self.slots[x.0].data;
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &md[i * c..(i + 1) * c];
            out[i] = dot(row, xd);
        }
        let out = self.push(vec![r], out);
        self.ops.push(Op::MatVec { m, x, out });
        Ok(out)
    }

    /// Applies `w` to every row of `v`: `v [T x m], w [n x m] -> [T x n]`.
    pub fn matvec_rows(&mut self, w: Value, v: Value) -> Result<Value, TensorError> {
        let (n, m) = self
            .dims2(w)
            .ok_or_else(|| self.mismatch("matvec_rows", w, v))?;
        let (t, mv) = self
            .dims2(v)
            .ok_or_else(|| self.mismatch("matvec_rows", w, v))?;
        if mv != m {
            return Err(self.mismatch("matvec_rows", w, v));
        }
        let wd = &self.slots[w.0].data;
        let vd = &self.slots[v.0].data;
        let mut out = vec![0.0; t * n];
        for ti in 0..t {
            let row = &vd[ti * m..(ti + 1) * m];
            for i in 0..n {
                out[ti * n + i] = dot(&wd[i * m..(i + 1) * m], row);
            }
        }
        let out = self.push(vec![t, n], out);
        self.ops.push(Op::RowsMatVec { w, v, out });
        Ok(out)
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_rows(&mut self, m: Value, x: Value) -> Result<Value, TensorError> {
        let (t, n) = self
            .dims2(m)
            .ok_or_else(|| self.mismatch("add_rows", m, x))?;
        if self.len1(x) != Some(n) {
            return Err(self.mismatch("add_rows", m, x));
        }
        let md = &self.slots[m.0].data;
        let xd = &self.slots[x.0].data;
        let mut out = vec![0.0; t * n];
        for ti in 0..t {
            for i in 0..n {
                out[ti * n + i] = md[ti * n + i] + xd[i];
            }
        }
        let out = self.push(vec![t, n], out);
        self.ops.push(Op::AddRows { m, x, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.slots[a.0].shape.clone();
        let out = self.push(shape, out);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.slots[a.0].shape.clone();
        let out = self.push(shape, out);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let out: Vec<f64> = self.slots[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.slots[a.0].shape.clone();
        let out = self.push(shape, out);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    /// Elementwise hyperbolic tangent; gradient `1 - tanh^2`.
    pub fn tanh(&mut self, x: Value) -> Value {
        let out: Vec<f64> = self.slots[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.slots[x.0].shape.clone();
        let out = self.push(shape, out);
        self.ops.push(Op::Tanh { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let out: Vec<f64> = self.slots[x.0]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.slots[x.0].shape.clone();
        let out = self.push(shape, out);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: Value) -> Result<Value, TensorError> {
        let n = self
            .len1(x)
            .ok_or(TensorError::Empty { op: "softmax" })?;
        if n == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let out = softmax_slice(&self.slots[x.0].data);
        let out = self.push(vec![n], out);
        self.ops.push(Op::Softmax { x, out });
        Ok(out)
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        if self.slots[a.0].shape != self.slots[b.0].shape || self.len1(a).is_none() {
            return Err(self.mismatch("dot", a, b));
        }
        let d = dot(&self.slots[a.0].data, &self.slots[b.0].data);
        let out = self.push(vec![1], vec![d]);
        self.ops.push(Op::Dot { a, b, out });
        Ok(out)
    }

    /// Convex combination of matrix rows: `p [T], v [T x m] -> [m]`.
    pub fn weighted_row_sum(&mut self, p: Value, v: Value) -> Result<Value, TensorError> {
        let (t, m) = self
            .dims2(v)
            .ok_or_else(|| self.mismatch("weighted_row_sum", p, v))?;
        if self.len1(p) != Some(t) {
            return Err(self.mismatch("weighted_row_sum", p, v));
        }
        let pd = &self.slots[p.0].data;
        let vd = &self.slots[v.0].data;
        let mut out = vec![0.0; m];
        for ti in 0..t {
            let w = pd[ti];
            for k in 0..m {
                out[k] += w * vd[ti * m + k];
            }
        }
        let out = self.push(vec![m], out);
        self.ops.push(Op::WeightedRowSum { p, v, out });
        Ok(out)
    }

    pub fn concat(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (la, lb) = match (self.len1(a), self.len1(b)) {
            (Some(la), Some(lb)) => (la, lb),
            _ => return Err(self.mismatch("concat", a, b)),
        };
        let mut out = Vec::with_capacity(la + lb);
        out.extend_from_slice(&self.slots[a.0].data);
        out.extend_from_slice(&self.slots[b.0].data);
        let out = self.push(vec![la + lb], out);
        self.ops.push(Op::Concat { a, b, out });
        Ok(out)
    }

    pub fn slice(&mut self, x: Value, start: usize, len: usize) -> Result<Value, TensorError> {
        let n = self.len1(x).ok_or(TensorError::BadIndex {
            op: "slice",
            index: start,
            bound: 0,
        })?;
        if start + len > n {
            return Err(TensorError::BadIndex {
                op: "slice",
                index: start + len,
                bound: n,
            });
        }
        let out = self.slots[x.0].data[start..start + len].to_vec();
        let out = self.push(vec![len], out);
        self.ops.push(Op::Slice { x, start, out });
        Ok(out)
    }

    /// Stacks equal-length vectors into a `[rows.len() x m]` matrix.
    pub fn stack_rows(&mut self, rows: &[Value]) -> Result<Value, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Empty { op: "stack_rows" });
        }
        let m = self
            .len1(rows[0])
            .ok_or(TensorError::Empty { op: "stack_rows" })?;
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if self.len1(r) != Some(m) {
                return Err(self.mismatch("stack_rows", rows[0], r));
            }
            out.extend_from_slice(&self.slots[r.0].data);
        }
        let out = self.push(vec![rows.len(), m], out);
        self.ops.push(Op::StackRows {
            rows: rows.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar value.
    pub fn sum(&mut self, x: Value) -> Value {
        let s: f64 = self.slots[x.0].data.iter().sum();
        let out = self.push(vec![1], vec![s]);
        self.ops.push(Op::Sum { x, out });
        out
    }

    /// Cross-entropy of a target class against raw logits, computed as
    /// `logsumexp(logits) - logits[target]` for stability.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Value,
        target: usize,
    ) -> Result<Value, TensorError> {
        let n = self.len1(logits).ok_or(TensorError::Empty {
            op: "cross_entropy_logits",
        })?;
        if target >= n {
            return Err(TensorError::BadIndex {
                op: "cross_entropy_logits",
                index: target,
                bound: n,
            });
        }
        let d = &self.slots[logits.0].data;
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = self.push(vec![1], vec![lse - d[target]]);
        self.ops.push(Op::CrossEntropyLogits {
            logits,
            target,
            out,
        });
        Ok(out)
    }

    /// Runs the reverse pass from a scalar loss, resetting all gradient
    /// buffers first. Every leaf reachable from `loss` ends up holding
    /// `d(loss)/d(leaf)`; unreachable values keep gradient zero.
    pub fn backward(&mut self, loss: Value) -> Result<(), TensorError> {
        if self.slots[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.slots[loss.0].shape.clone(),
            });
        }
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.slots[loss.0].grad[0] = 1.0;

        for i in (0..self.ops.len()).rev() {
            match &self.ops[i] {
                &Op::MatVec { m, x, out } => {
                    let c = self.slots[x.0].data.len();
                    let r = self.slots[out.0].data.len();
                    let go = self.slots[out.0].grad.clone();
                    let xd = self.slots[x.0].data.clone();
                    let md = self.slots[m.0].data.clone();
                    {
                        let gm = &mut self.slots[m.0].grad;
                        for i in 0..r {
                            let g = go[i];
                            if g != 0.0 {
                                for j in 0..c {
                                    gm[i * c + j] += g * xd[j];
                                }
                            }
                        }
                    }
                    {
                        let gx = &mut self.slots[x.0].grad;
                        for i in 0..r {
                            let g = go[i];
                            if g != 0.0 {
                                for j in 0..c {
                                    gx[j] += md[i * c + j] * g;
                                }
                            }
                        }
                    }
                }
                &Op::RowsMatVec { w, v, out } => {
                    let (t, n) = (self.slots[v.0].shape[0], self.slots[out.0].shape[1]);
                    let m = self.slots[v.0].shape[1];
                    let go = self.slots[out.0].grad.clone();
                    let wd = self.slots[w.0].data.clone();
                    let vd = self.slots[v.0].data.clone();
                    {
                        let gw = &mut self.slots[w.0].grad;
                        for ti in 0..t {
                            for i in 0..n {
                                let g = go[ti * n + i];
                                if g != 0.0 {
                                    for j in 0..m {
                                        gw[i * m + j] += g * vd[ti * m + j];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gv = &mut self.slots[v.0].grad;
                        for ti in 0..t {
                            for i in 0..n {
                                let g = go[ti * n + i];
                                if g != 0.0 {
                                    for j in 0..m {
                                        gv[ti * m + j] += wd[i * m + j] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::AddRows { m, x, out } => {
                    let (t, n) = (self.slots[m.0].shape[0], self.slots[m.0].shape[1]);
                    let go = self.slots[out.0].grad.clone();
                    for (gm, g) in self.slots[m.0].grad.iter_mut().zip(&go) {
                        *gm += g;
                    }
                    let gx = &mut self.slots[x.0].grad;
                    for ti in 0..t {
                        for i in 0..n {
                            gx[i] += go[ti * n + i];
                        }
                    }
                }
                &Op::Add { a, b, out } => {
                    let go = self.slots[out.0].grad.clone();
                    for (g, d) in self.slots[a.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                    for (g, d) in self.slots[b.0].grad.iter_mut().zip(&go) {
                        *g += d;
                    }
                }
                &Op::Mul { a, b, out } => {
                    let go = self.slots[out.0].grad.clone();
                    let ad = self.slots[a.0].data.clone();
                    let bd = self.slots[b.0].data.clone();
                    for ((g, d), y) in self.slots[a.0].grad.iter_mut().zip(&go).zip(&bd) {
                        *g += d * y;
                    }
                    for ((g, d), y) in self.slots[b.0].grad.iter_mut().zip(&go).zip(&ad) {
                        *g += d * y;
                    }
                }
                &Op::Scale { a, c, out } => {
                    let go = self.slots[out.0].grad.clone();
                    for (g, d) in self.slots[a.0].grad.iter_mut().zip(&go) {
                        *g += c * d;
                    }
                }
                &Op::Tanh { x, out } => {
                    let go = self.slots[out.0].grad.clone();
                    let yd = self.slots[out.0].data.clone();
                    for ((g, d), y) in self.slots[x.0].grad.iter_mut().zip(&go).zip(&yd) {
                        *g += d * (1.0 - y * y);
                    }
                }
                &Op::Sigmoid { x, out } => {
                    let go = self.slots[out.0].grad.clone();
                    let yd = self.slots[out.0].data.clone();
                    for ((g, d), y) in self.slots[x.0].grad.iter_mut().zip(&go).zip(&yd) {
                        *g += d * y * (1.0 - y);
                    }
                }
                &Op::Softmax { x, out } => {
                    // dx_i = y_i * (go_i - sum_j go_j y_j)
                    let go = self.slots[out.0].grad.clone();
                    let yd = self.slots[out.0].data.clone();
                    let inner: f64 = go.iter().zip(&yd).map(|(g, y)| g * y).sum();
                    for ((g, d), y) in self.slots[x.0].grad.iter_mut().zip(&go).zip(&yd) {
                        *g += y * (d - inner);
                    }
                }
                &Op::Dot { a, b, out } => {
                    let g0 = self.slots[out.0].grad[0];
                    let ad = self.slots[a.0].data.clone();
                    let bd = self.slots[b.0].data.clone();
                    for (g, y) in self.slots[a.0].grad.iter_mut().zip(&bd) {
                        *g += g0 * y;
                    }
                    for (g, y) in self.slots[b.0].grad.iter_mut().zip(&ad) {
                        *g += g0 * y;
                    }
                }
                &Op::WeightedRowSum { p, v, out } => {
                    let (t, m) = (self.slots[v.0].shape[0], self.slots[v.0].shape[1]);
                    let go = self.slots[out.0].grad.clone();
                    let pd = self.slots[p.0].data.clone();
                    let vd = self.slots[v.0].data.clone();
                    {
                        let gp = &mut self.slots[p.0].grad;
                        for ti in 0..t {
                            gp[ti] += dot(&go, &vd[ti * m..(ti + 1) * m]);
                        }
                    }
                    {
                        let gv = &mut self.slots[v.0].grad;
                        for ti in 0..t {
                            let w = pd[ti];
                            for k in 0..m {
                                gv[ti * m + k] += w * go[k];
                            }
                        }
                    }
                }
                &Op::Concat { a, b, out } => {
                    let la = self.slots[a.0].data.len();
                    let go = self.slots[out.0].grad.clone();
                    for (g, d) in self.slots[a.0].grad.iter_mut().zip(&go[..la]) {
                        *g += d;
                    }
                    for (g, d) in self.slots[b.0].grad.iter_mut().zip(&go[la..]) {
                        *g += d;
                    }
                }
                &Op::Slice { x, start, out } => {
                    let go = self.slots[out.0].grad.clone();
                    for (k, d) in go.iter().enumerate() {
                        self.slots[x.0].grad[start + k] += d;
                    }
                }
                Op::StackRows { rows, out } => {
                    let rows = rows.clone();
                    let out = *out;
                    let m = self.slots[out.0].shape[1];
                    let go = self.slots[out.0].grad.clone();
                    for (ti, r) in rows.iter().enumerate() {
                        for (g, d) in self.slots[r.0].grad.iter_mut().zip(&go[ti * m..(ti + 1) * m])
                        {
                            *g += d;
                        }
                    }
                }
                &Op::Sum { x, out } => {
                    let g0 = self.slots[out.0].grad[0];
                    for g in self.slots[x.0].grad.iter_mut() {
                        *g += g0;
                    }
                }
                &Op::CrossEntropyLogits {
                    logits,
                    target,
                    out,
                } => {
                    let g0 = self.slots[out.0].grad[0];
                    let sm = softmax_slice(&self.slots[logits.0].data);
                    let gl = &mut self.slots[logits.0].grad;
                    for (k, (g, y)) in gl.iter_mut().zip(&sm).enumerate() {
                        let onehot = if k == target { 1.0 } else { 0.0 };
                        *g += g0 * (y - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax over a plain slice. Shared by the tape op and
/// off-tape consumers (evaluation, attention dumps).
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
