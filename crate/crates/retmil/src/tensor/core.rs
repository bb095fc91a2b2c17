//! Tensor values, the operation graph, and reverse-mode backpropagation.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::meter;
use super::scalar::Scalar;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// metered buffer

/// Contiguous value buffer whose allocation is reported to the meter.
pub(crate) struct Buf<T> {
    v: Vec<T>,
}

impl<T: Scalar> Buf<T> {
    pub(crate) fn from_vec(v: Vec<T>) -> Self {
        meter::on_alloc(v.len() * std::mem::size_of::<T>());
        Buf { v }
    }

    pub(crate) fn zeros(n: usize) -> Self {
        Buf::from_vec(vec![T::zero(); n])
    }

    pub(crate) fn as_slice(&self) -> &[T] {
        &self.v
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.v
    }
}

impl<T> Drop for Buf<T> {
    fn drop(&mut self) {
        meter::on_free(self.v.len() * std::mem::size_of::<T>());
    }
}

// ---------------------------------------------------------------------------
// gradient mode

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when operations record backward information.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// RAII guard that disables gradient recording on the current thread.
/// Inference and benchmarking run under this guard so intermediates are
/// freed as soon as they go out of scope.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

// ---------------------------------------------------------------------------
// graph node

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

enum Op<T: Scalar> {
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(T),
    Tanh,
    Sigmoid,
    Swish,
    Exp,
    SoftmaxRows,
    GroupNorm { groups: usize, eps: T },
    CrossEntropy { label: usize },
    SumAll,
    StackRows,
    IndexRow { index: usize },
    SliceCols { start: usize },
    ConcatCols,
    Rope { cos: Vec<T>, sin: Vec<T> },
    Reshape,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Buf<T>>,
    grad: RefCell<Option<Buf<T>>>,
    parents: Vec<Tensor<T>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Reference-counted tensor handle; clones share the same value.
pub struct Tensor<T: Scalar> {
    inner: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

fn check_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::dim(op, format!("rank {} outside 1..=3", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::dim(op, format!("zero-sized dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::dim(op, format!("shape {shape:?} does not match {len} values")));
    }
    Ok(())
}

fn ensure_finite<T: Scalar>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        op: Option<Op<T>>,
        requires_grad: bool,
    ) -> Tensor<T> {
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(Buf::from_vec(data)),
                grad: RefCell::new(None),
                parents,
                op,
                requires_grad,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        check_shape(shape, data.len(), "from_vec")?;
        ensure_finite(&data, "from_vec")?;
        Ok(Self::new_node(shape.to_vec(), data, Vec::new(), None, false))
    }

    /// Leaf parameter: gradients accumulate here during backward.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        check_shape(shape, data.len(), "param")?;
        ensure_finite(&data, "param")?;
        Ok(Self::new_node(shape.to_vec(), data, Vec::new(), None, true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        check_shape(shape, numel, "zeros")?;
        Ok(Self::new_node(shape.to_vec(), vec![T::zero(); numel], Vec::new(), None, false))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        check_shape(shape, numel, "full")?;
        ensure_finite(&[value], "full")?;
        Ok(Self::new_node(shape.to_vec(), vec![value; numel], Vec::new(), None, false))
    }

    /// Xavier-uniform parameter of shape `[rows, cols]`. Samples are drawn in
    /// f64 and converted, so f32 and f64 models see the same sequence.
    pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(rng.gen::<f64>() * 2.0 * limit - limit))
            .collect();
        Self::param(&[rows, cols], data)
    }

    fn op_result(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        op: Op<T>,
        name: &'static str,
    ) -> Result<Tensor<T>> {
        ensure_finite(&data, name)?;
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Ok(Self::new_node(shape, data, parents, Some(op), true))
        } else {
            Ok(Self::new_node(shape, data, Vec::new(), None, false))
        }
    }

    // -- accessors ----------------------------------------------------------

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |b| b.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().as_slice().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::dim("item", format!("numel {} != 1", self.numel())));
        }
        Ok(self.inner.data.borrow().as_slice()[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().as_ref().map(|b| b.as_slice().to_vec())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the value in place (used by the optimizer and by
    /// finite-difference probes). Shape is fixed.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim("set_data", format!("{} values for numel {}", values.len(), self.numel())));
        }
        ensure_finite(values, "set_data")?;
        self.inner.data.borrow_mut().as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    /// Mutate the value in place through a closure.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    fn accum_grad(&self, contrib: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| Buf::zeros(self.numel()));
        for (g, c) in buf.as_mut_slice().iter_mut().zip(contrib) {
            *g += *c;
        }
    }

    // -- matrix ops ---------------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 {
            return Err(Error::dim("matmul", format!("expected rank-2 operands, got {a:?} x {b:?}")));
        }
        let (m, k, k2, n) = (a[0], a[1], b[0], b[1]);
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data(),
            k as isize,
            1,
            &rhs.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Self::op_result(vec![m, n], out, vec![self.clone(), rhs.clone()], Op::Matmul, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Self::op_result(vec![c, r], out, vec![self.clone()], Op::Transpose, "transpose")
    }

    // -- elementwise ops ----------------------------------------------------

    fn binary(&self, rhs: &Tensor<T>, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (la, lb) = (self.numel(), rhs.numel());
        let (a, b) = (self.data(), rhs.data());
        let (shape, out): (Vec<usize>, Vec<T>) = if self.shape() == rhs.shape() {
            (self.shape().to_vec(), a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
        } else if la == 1 {
            (rhs.shape().to_vec(), b.iter().map(|&y| f(a[0], y)).collect())
        } else if lb == 1 {
            (self.shape().to_vec(), a.iter().map(|&x| f(x, b[0])).collect())
        } else {
            return Err(Error::dim(
                name,
                format!("shapes {:?} and {:?} are not same-shape or scalar-broadcast", self.shape(), rhs.shape()),
            ));
        };
        drop(a);
        drop(b);
        Self::op_result(shape, out, vec![self.clone(), rhs.clone()], op, name)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Op::Sub, "sub", |x, y| x - y)
    }

    /// Hadamard product (same shape) or scalar product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let out: Vec<T> = self.data().iter().map(|&x| x * c).collect();
        Self::op_result(self.shape().to_vec(), out, vec![self.clone()], Op::Scale(c), "scale")
    }

    fn unary(&self, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Self::op_result(self.shape().to_vec(), out, vec![self.clone()], op, name)
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        self.unary(Op::Tanh, "tanh", |x| x.tanh())
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(Op::Sigmoid, "sigmoid", sigmoid_val)
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&self) -> Result<Tensor<T>> {
        self.unary(Op::Swish, "swish", |x| x * sigmoid_val(x))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(Op::Exp, "exp", |x| x.exp())
    }

    // -- reductions and structured ops --------------------------------------

    /// Softmax over the last axis of a rank-1 or rank-2 tensor, computed with
    /// max-subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (rows, width) = match self.shape() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            s => return Err(Error::dim("softmax", format!("expected rank 1 or 2, got {s:?}"))),
        };
        let x = self.data();
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[r * width..(r + 1) * width] {
                *o = *o / sum;
            }
        }
        drop(x);
        Self::op_result(self.shape().to_vec(), out, vec![self.clone()], Op::SoftmaxRows, "softmax")
    }

    /// Per-row grouped normalization of an `[n, d]` tensor followed by the
    /// affine map `gain ⊙ out + bias` (`gain`, `bias` of shape `[d]`).
    pub fn group_norm(&self, groups: usize, eps: T, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("group_norm", format!("expected rank 2, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!("group_norm: width {d} not divisible by {groups} groups")));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::dim("group_norm", format!("affine shape {:?}/{:?} for width {d}", gain.shape(), bias.shape())));
        }
        if eps <= T::zero() {
            return Err(Error::Config("group_norm: eps must be positive".into()));
        }
        let gs = d / groups;
        let x = self.data();
        let gn = gain.data();
        let bs = bias.data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for g in 0..groups {
                let base = r * d + g * gs;
                let slice = &x[base..base + gs];
                let (mean, var) = mean_var(slice);
                let istd = T::one() / (var + eps).sqrt();
                for j in 0..gs {
                    let xhat = (slice[j] - mean) * istd;
                    out[base + j] = gn[g * gs + j] * xhat + bs[g * gs + j];
                }
            }
        }
        drop(x);
        drop(gn);
        drop(bs);
        Self::op_result(
            vec![n, d],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Op::GroupNorm { groups, eps },
            "group_norm",
        )
    }

    /// -log softmax(logits)[label] as a single-element tensor.
    pub fn cross_entropy_logits(&self, label: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::dim("cross_entropy", format!("expected rank-1 logits, got {s:?}")));
        }
        if label >= s[0] {
            return Err(Error::Input(format!("label {label} out of range for {} classes", s[0])));
        }
        let x = self.data();
        let mut max = x[0];
        for &v in x.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in x.iter() {
            sum += (v - max).exp();
        }
        let loss = sum.ln() + max - x[label];
        drop(x);
        Self::op_result(vec![1], vec![loss], vec![self.clone()], Op::CrossEntropy { label }, "cross_entropy")
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut s = T::zero();
        for &v in self.data().iter() {
            s += v;
        }
        Self::op_result(vec![1], vec![s], vec![self.clone()], Op::SumAll, "sum_all")
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::dim("stack_rows", "no tensors to stack".to_string()))?;
        let inner = first.shape().to_vec();
        if inner.len() >= 3 {
            return Err(Error::dim("stack_rows", "stacking rank-3 tensors exceeds rank 3".to_string()));
        }
        let stride: usize = inner.iter().product();
        let mut data = Vec::with_capacity(parts.len() * stride);
        for p in parts {
            if p.shape() != inner.as_slice() {
                return Err(Error::dim("stack_rows", format!("mixed shapes {:?} vs {inner:?}", p.shape())));
            }
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        Self::op_result(shape, data, parts.to_vec(), Op::StackRows, "stack_rows")
    }

    /// Select index `i` along the leading axis, dropping that axis.
    pub fn index_row(&self, index: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::dim("index_row", format!("expected rank >= 2, got {s:?}")));
        }
        if index >= s[0] {
            return Err(Error::dim("index_row", format!("index {index} out of bounds for {}", s[0])));
        }
        let stride: usize = s[1..].iter().product();
        let out = self.data()[index * stride..(index + 1) * stride].to_vec();
        Self::op_result(s[1..].to_vec(), out, vec![self.clone()], Op::IndexRow { index }, "index_row")
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("slice_cols", format!("expected rank 2, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of width {d}", start + len)));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x[r * d + start..r * d + start + len]);
        }
        drop(x);
        Self::op_result(vec![n, len], out, vec![self.clone()], Op::SliceCols { start }, "slice_cols")
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate".to_string()))?;
        if first.rank() != 2 {
            return Err(Error::dim("concat_cols", "expected rank-2 parts".to_string()));
        }
        let n = first.shape()[0];
        let mut total = 0usize;
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != n {
                return Err(Error::dim("concat_cols", format!("row mismatch: {:?}", p.shape())));
            }
            total += p.shape()[1];
        }
        let mut out = vec![T::zero(); n * total];
        let mut col = 0usize;
        for p in parts {
            let w = p.shape()[1];
            let x = p.data();
            for r in 0..n {
                out[r * total + col..r * total + col + w].copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Self::op_result(vec![n, total], out, parts.to_vec(), Op::ConcatCols, "concat_cols")
    }

    /// Rotary position encoding on an `[n, d]` tensor with even `d`:
    /// coordinate pair `(2j, 2j+1)` of row `r` rotates by
    /// `positions[r] * base^(-2j/d)`. Norm-preserving per pair.
    pub fn rope(&self, positions: &[T], base: T) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("rope", format!("expected rank 2, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope: head width {d} must be even")));
        }
        if positions.len() != n {
            return Err(Error::dim("rope", format!("{} positions for {n} rows", positions.len())));
        }
        let half = d / 2;
        let thetas: Vec<T> = (0..half)
            .map(|j| base.powf(T::from_f64(-2.0 * j as f64 / d as f64)))
            .collect();
        let mut cos = vec![T::zero(); n * half];
        let mut sin = vec![T::zero(); n * half];
        for r in 0..n {
            for j in 0..half {
                let angle = positions[r] * thetas[j];
                cos[r * half + j] = angle.cos();
                sin[r * half + j] = angle.sin();
            }
        }
        let x = self.data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for j in 0..half {
                let (c, s_) = (cos[r * half + j], sin[r * half + j]);
                let x0 = x[r * d + 2 * j];
                let x1 = x[r * d + 2 * j + 1];
                out[r * d + 2 * j] = x0 * c - x1 * s_;
                out[r * d + 2 * j + 1] = x0 * s_ + x1 * c;
            }
        }
        drop(x);
        Self::op_result(vec![n, d], out, vec![self.clone()], Op::Rope { cos, sin }, "rope")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        check_shape(shape, self.numel(), "reshape")?;
        let out = self.to_vec();
        Self::op_result(shape.to_vec(), out, vec![self.clone()], Op::Reshape, "reshape")
    }

    // -- backward -----------------------------------------------------------

    /// Reverse-mode backpropagation from a single-element tensor. Gradients
    /// accumulate into every reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be a scalar, got {:?}", self.shape())));
        }
        if !self.inner.requires_grad {
            return Err(Error::State("backward on a tensor with no gradient path".into()));
        }
        self.accum_grad(&[T::one()]);

        let order = self.topo_order();
        for node in order.iter().rev() {
            let Some(op) = &node.inner.op else { continue };
            let grad = {
                let g = node.inner.grad.borrow();
                match g.as_ref() {
                    Some(buf) => buf.as_slice().to_vec(),
                    None => continue,
                }
            };
            node.backprop(op, &grad);
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS over parents.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if next.inner.requires_grad && visited.insert(next.inner.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    fn backprop(&self, op: &Op<T>, grad: &[T]) {
        let parents = &self.inner.parents;
        match op {
            Op::Matmul => {
                let (a, b) = (&parents[0], &parents[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.inner.requires_grad {
                    let bd = b.data();
                    let mut slot = a.inner.grad.borrow_mut();
                    let buf = slot.get_or_insert_with(|| Buf::zeros(m * k));
                    // dA += G * B^T
                    T::gemm(m, n, k, T::one(), grad, n as isize, 1, &bd, 1, n as isize, T::one(), buf.as_mut_slice(), k as isize, 1);
                }
                if b.inner.requires_grad {
                    let ad = a.data();
                    let mut slot = b.inner.grad.borrow_mut();
                    let buf = slot.get_or_insert_with(|| Buf::zeros(k * n));
                    // dB += A^T * G
                    T::gemm(k, m, n, T::one(), &ad, 1, k as isize, grad, n as isize, 1, T::one(), buf.as_mut_slice(), n as isize, 1);
                }
            }
            Op::Transpose => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    let (r, c) = (self.shape()[0], self.shape()[1]);
                    let mut dp = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dp[j * r + i] = grad[i * c + j];
                        }
                    }
                    p.accum_grad(&dp);
                }
            }
            Op::Add | Op::Sub => {
                let negate = matches!(op, Op::Sub);
                let (a, b) = (&parents[0], &parents[1]);
                if a.inner.requires_grad {
                    a.accum_grad(&reduce_or_pass(grad, a.numel()));
                }
                if b.inner.requires_grad {
                    let mut db = reduce_or_pass(grad, b.numel());
                    if negate {
                        for v in &mut db {
                            *v = -*v;
                        }
                    }
                    b.accum_grad(&db);
                }
            }
            Op::Mul => {
                let (a, b) = (&parents[0], &parents[1]);
                if a.inner.requires_grad {
                    let bd = b.data();
                    let full: Vec<T> = if b.numel() == 1 {
                        grad.iter().map(|&g| g * bd[0]).collect()
                    } else {
                        grad.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()
                    };
                    drop(bd);
                    a.accum_grad(&reduce_or_pass(&full, a.numel()));
                }
                if b.inner.requires_grad {
                    let ad = a.data();
                    let full: Vec<T> = if a.numel() == 1 {
                        grad.iter().map(|&g| g * ad[0]).collect()
                    } else {
                        grad.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()
                    };
                    drop(ad);
                    b.accum_grad(&reduce_or_pass(&full, b.numel()));
                }
            }
            Op::Scale(c) => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    let dp: Vec<T> = grad.iter().map(|&g| g * *c).collect();
                    p.accum_grad(&dp);
                }
            }
            Op::Tanh => {
                self.unary_backprop(grad, |_, y| T::one() - y * y);
            }
            Op::Sigmoid => {
                self.unary_backprop(grad, |_, y| y * (T::one() - y));
            }
            Op::Swish => {
                self.unary_backprop(grad, |x, _| {
                    let s = sigmoid_val(x);
                    s * (T::one() + x * (T::one() - s))
                });
            }
            Op::Exp => {
                self.unary_backprop(grad, |_, y| y);
            }
            Op::SoftmaxRows => {
                let p = &parents[0];
                if !p.inner.requires_grad {
                    return;
                }
                let y = self.data();
                let width = *self.shape().last().unwrap();
                let rows = self.numel() / width;
                let mut dp = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let off = r * width;
                    let mut dot = T::zero();
                    for j in 0..width {
                        dot += grad[off + j] * y[off + j];
                    }
                    for j in 0..width {
                        dp[off + j] = y[off + j] * (grad[off + j] - dot);
                    }
                }
                drop(y);
                p.accum_grad(&dp);
            }
            Op::GroupNorm { groups, eps } => {
                self.group_norm_backprop(grad, *groups, *eps);
            }
            Op::CrossEntropy { label } => {
                let p = &parents[0];
                if !p.inner.requires_grad {
                    return;
                }
                let x = p.data();
                let c = x.len();
                let mut max = x[0];
                for &v in x.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                let mut probs = vec![T::zero(); c];
                for (pr, &v) in probs.iter_mut().zip(x.iter()) {
                    let e = (v - max).exp();
                    *pr = e;
                    sum += e;
                }
                drop(x);
                let g0 = grad[0];
                for (j, pr) in probs.iter_mut().enumerate() {
                    let soft = *pr / sum;
                    let target = if j == *label { T::one() } else { T::zero() };
                    *pr = g0 * (soft - target);
                }
                p.accum_grad(&probs);
            }
            Op::SumAll => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    p.accum_grad(&vec![grad[0]; p.numel()]);
                }
            }
            Op::StackRows => {
                let stride = parents[0].numel();
                for (i, p) in parents.iter().enumerate() {
                    if p.inner.requires_grad {
                        p.accum_grad(&grad[i * stride..(i + 1) * stride]);
                    }
                }
            }
            Op::IndexRow { index } => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    let stride = self.numel();
                    let mut dp = vec![T::zero(); p.numel()];
                    dp[index * stride..(index + 1) * stride].copy_from_slice(grad);
                    p.accum_grad(&dp);
                }
            }
            Op::SliceCols { start } => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    let (n, len) = (self.shape()[0], self.shape()[1]);
                    let d = p.shape()[1];
                    let mut dp = vec![T::zero(); p.numel()];
                    for r in 0..n {
                        dp[r * d + start..r * d + start + len].copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    p.accum_grad(&dp);
                }
            }
            Op::ConcatCols => {
                let n = self.shape()[0];
                let total = self.shape()[1];
                let mut col = 0usize;
                for p in parents {
                    let w = p.shape()[1];
                    if p.inner.requires_grad {
                        let mut dp = vec![T::zero(); n * w];
                        for r in 0..n {
                            dp[r * w..(r + 1) * w].copy_from_slice(&grad[r * total + col..r * total + col + w]);
                        }
                        p.accum_grad(&dp);
                    }
                    col += w;
                }
            }
            Op::Rope { cos, sin } => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    let (n, d) = (self.shape()[0], self.shape()[1]);
                    let half = d / 2;
                    let mut dp = vec![T::zero(); n * d];
                    // Inverse rotation: rotate the gradient by the negated angle.
                    for r in 0..n {
                        for j in 0..half {
                            let (c, s) = (cos[r * half + j], sin[r * half + j]);
                            let g0 = grad[r * d + 2 * j];
                            let g1 = grad[r * d + 2 * j + 1];
                            dp[r * d + 2 * j] = g0 * c + g1 * s;
                            dp[r * d + 2 * j + 1] = -g0 * s + g1 * c;
                        }
                    }
                    p.accum_grad(&dp);
                }
            }
            Op::Reshape => {
                let p = &parents[0];
                if p.inner.requires_grad {
                    p.accum_grad(grad);
                }
            }
        }
    }

    fn unary_backprop(&self, grad: &[T], deriv: impl Fn(T, T) -> T) {
        let p = &self.inner.parents[0];
        if !p.inner.requires_grad {
            return;
        }
        let x = p.data();
        let y = self.data();
        let dp: Vec<T> = grad
            .iter()
            .zip(x.iter().zip(y.iter()))
            .map(|(&g, (&xv, &yv))| g * deriv(xv, yv))
            .collect();
        drop(x);
        drop(y);
        p.accum_grad(&dp);
    }

    fn group_norm_backprop(&self, grad: &[T], groups: usize, eps: T) {
        let x_t = &self.inner.parents[0];
        let gain_t = &self.inner.parents[1];
        let bias_t = &self.inner.parents[2];
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let gs = d / groups;
        let gsf = T::from_usize(gs);

        let x = x_t.data();
        let gain = gain_t.data();
        let mut dx = vec![T::zero(); n * d];
        let mut dgain = vec![T::zero(); d];
        let mut dbias = vec![T::zero(); d];

        for r in 0..n {
            for g in 0..groups {
                let base = r * d + g * gs;
                let slice = &x[base..base + gs];
                let (mean, var) = mean_var(slice);
                let istd = T::one() / (var + eps).sqrt();

                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..gs {
                    let xhat = (slice[j] - mean) * istd;
                    let go = grad[base + j];
                    dgain[g * gs + j] += go * xhat;
                    dbias[g * gs + j] += go;
                    let dxhat = go * gain[g * gs + j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let mean_dxhat = sum_dxhat / gsf;
                let mean_dxhat_xhat = sum_dxhat_xhat / gsf;
                for j in 0..gs {
                    let xhat = (slice[j] - mean) * istd;
                    let dxhat = grad[base + j] * gain[g * gs + j];
                    dx[base + j] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        drop(x);
        drop(gain);

        if x_t.inner.requires_grad {
            x_t.accum_grad(&dx);
        }
        if gain_t.inner.requires_grad {
            gain_t.accum_grad(&dgain);
        }
        if bias_t.inner.requires_grad {
            bias_t.accum_grad(&dbias);
        }
    }
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn mean_var<T: Scalar>(slice: &[T]) -> (T, T) {
    let nf = T::from_usize(slice.len());
    let mut mean = T::zero();
    for &v in slice {
        mean += v;
    }
    mean = mean / nf;
    let mut var = T::zero();
    for &v in slice {
        let c = v - mean;
        var += c * c;
    }
    (mean, var / nf)
}

/// Pass the gradient through unchanged, or collapse it to a single sum when
/// the operand was a broadcast scalar.
fn reduce_or_pass<T: Scalar>(grad: &[T], target_numel: usize) -> Vec<T> {
    if target_numel == grad.len() {
        grad.to_vec()
    } else {
        debug_assert_eq!(target_numel, 1);
        let mut s = T::zero();
        for &g in grad {
            s += g;
        }
        vec![s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let id = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = t2(2, 2, &[3.0, -1.0, 2.5, 7.0]);
        let out = id.matmul(&m).unwrap();
        assert_eq!(out.to_vec(), m.to_vec());
    }

    #[test]
    fn matmul_hand_example() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[1.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        assert!(matches!(a.matmul(&b), Err(Error::Dim { .. })));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_vec(&[3], vec![4.2f64, 4.2, 4.2]).unwrap();
        let s = t.softmax_rows().unwrap();
        for v in s.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let t = Tensor::from_vec(&[2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let s = t.softmax_rows().unwrap();
        let v = s.to_vec();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);

        // max-subtraction keeps huge logits stable
        let t = Tensor::from_vec(&[2], vec![1000.0f64, 1000.0]).unwrap();
        let v = t.softmax_rows().unwrap().to_vec();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);

        // softmax([0, 5])[1] = sigmoid(5)
        let t = Tensor::from_vec(&[2], vec![0.0f64, 5.0]).unwrap();
        let v = t.softmax_rows().unwrap().to_vec();
        let sig5 = 1.0 / (1.0 + (-5.0f64).exp());
        assert!((v[1] - sig5).abs() < 1e-12, "{} vs {sig5}", v[1]);
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        assert_eq!(z.swish().unwrap().item().unwrap(), 0.0);
        assert_eq!(z.sigmoid().unwrap().item().unwrap(), 0.5);

        let a = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = Tensor::from_vec(&[1], vec![2.0f64]).unwrap();
        assert_eq!(a.mul(&s).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);

        let b = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn group_norm_examples() {
        let gain = Tensor::from_vec(&[4], vec![1.0f64; 4]).unwrap();
        let bias = Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap();

        // constant row normalizes to zero
        let x = t2(1, 4, &[5.0, 5.0, 5.0, 5.0]);
        let out = x.group_norm(1, 1e-5, &gain, &bias).unwrap();
        for v in out.to_vec() {
            assert!(v.abs() < 1e-9);
        }

        // already-normalized row passes through as eps -> 0
        let gain2 = Tensor::from_vec(&[2], vec![1.0f64; 2]).unwrap();
        let bias2 = Tensor::from_vec(&[2], vec![0.0f64; 2]).unwrap();
        let x = t2(1, 2, &[1.0, -1.0]);
        let out = x.group_norm(1, 1e-12, &gain2, &bias2).unwrap();
        let v = out.to_vec();
        assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 1.0).abs() < 1e-6);

        // indivisible group count is a configuration error
        assert!(matches!(x.group_norm(3, 1e-5, &gain2, &bias2), Err(Error::Config(_))));
    }

    #[test]
    fn group_norm_statistics() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let x = Tensor::from_vec(&[4, 8], data).unwrap();
        let gain = Tensor::from_vec(&[8], vec![1.0f64; 8]).unwrap();
        let bias = Tensor::from_vec(&[8], vec![0.0f64; 8]).unwrap();
        let out = x.group_norm(2, 1e-10, &gain, &bias).unwrap();
        let v = out.to_vec();
        for r in 0..4 {
            for g in 0..2 {
                let slice = &v[r * 8 + g * 4..r * 8 + g * 4 + 4];
                let mean: f64 = slice.iter().sum::<f64>() / 4.0;
                let var: f64 = slice.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-6, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "group var {var}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        let loss = logits.cross_entropy_logits(0).unwrap().item().unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);

        let logits = Tensor::from_vec(&[2], vec![10.0f64, -10.0]).unwrap();
        let loss = logits.cross_entropy_logits(0).unwrap().item().unwrap();
        // -ln sigmoid(20) = ln(1 + e^-20) ~= 2.061e-9
        let expected = (-20.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15, "{loss} vs {expected}");

        assert!(matches!(logits.cross_entropy_logits(2), Err(Error::Input(_))));
    }

    #[test]
    fn rope_preserves_norm_and_rotates() {
        // theta_0 = base^0 = 1, so position pi/2 rotates the first pair by 90 degrees
        let x = t2(1, 2, &[1.0, 0.0]);
        let out = x.rope(&[std::f64::consts::FRAC_PI_2], 10000.0).unwrap();
        let v = out.to_vec();
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

        // position 0 is the identity
        let x = t2(2, 4, &[0.3, -1.2, 0.7, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let out = x.rope(&[0.0, 0.0], 10000.0).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());

        // norms preserved per pair at arbitrary positions
        let out = x.rope(&[3.0, 17.0], 10000.0).unwrap();
        let (a, b) = (x.to_vec(), out.to_vec());
        for r in 0..2 {
            for j in 0..2 {
                let na = a[r * 4 + 2 * j].hypot(a[r * 4 + 2 * j + 1]);
                let nb = b[r * 4 + 2 * j].hypot(b[r * 4 + 2 * j + 1]);
                assert!((na - nb).abs() < 1e-6);
            }
        }

        let odd = t2(1, 3, &[1.0, 2.0, 3.0]);
        assert!(matches!(odd.rope(&[0.0], 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let big = Tensor::from_vec(&[1], vec![1e308f64]).unwrap();
        let res = big.mul(&big);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_accumulates_through_shared_operand() {
        let x = Tensor::param(&[2], vec![3.0f64, -1.0]).unwrap();
        // f = sum(x * x) -> df/dx = 2x
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![6.0, -2.0]);
    }

    #[test]
    fn no_grad_mode_builds_no_graph() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let guard = NoGradGuard::new();
        let y = x.tanh().unwrap();
        drop(guard);
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
    }
}
