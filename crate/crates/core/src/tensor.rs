//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Every non-scalar tensor used by the engine is a row-major matrix; scalars
//! carry an empty shape. Operations are recorded on a [`Tape`] as they run
//! forward, and [`Tape::backward`] replays the record in reverse to produce
//! exact gradients for every node that depends on a trainable leaf.
//!
//! All reductions walk their inputs left to right, so two backward passes over
//! the same tape produce bit-identical gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    InvalidLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("index {index} out of range for table with {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("concat_cols needs at least one input")]
    EmptyConcat,
}

/// Smallest row norm accepted by [`Tape::l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// A `rows × cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a `0 × 0` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        let c = self.cols().max(1);
        self.data.chunks(c).take(self.rows())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, TensorError> {
        let table = self.expect_matrix("select_rows")?;
        let cols = table.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= table.rows() {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: table.rows(),
                });
            }
            data.extend_from_slice(table.row(i));
        }
        Self::matrix(indices.len(), cols, data)
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("transpose")?;
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("matmul")?;
        let b = other.expect_matrix("matmul")?;
        if a.cols() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("matmul_nt")?;
        let b = other.expect_matrix("matmul_nt")?;
        if a.cols() != b.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Self::matrix(m, n, out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("matmul_tn")?;
        let b = other.expect_matrix("matmul_tn")?;
        if a.rows() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (k, m, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &a.data[p * m..(p + 1) * m];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (i, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("l2_normalize_rows")?;
        let mut out = a.clone();
        for (i, row) in out.data.chunks_mut(a.cols().max(1)).take(a.rows()).enumerate() {
            let norm = dot(row, row).sqrt();
            if !(norm > MIN_ROW_NORM) {
                return Err(TensorError::DegenerateRow { row: i, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("softmax_rows")?;
        let mut out = a.clone();
        for row in out.data.chunks_mut(a.cols().max(1)).take(a.rows()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(out)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("log_softmax_rows")?;
        let mut out = a.clone();
        for row in out.data.chunks_mut(a.cols().max(1)).take(a.rows()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column means of a matrix as a `1 × cols` row.
    pub fn mean_rows(&self) -> Result<Self, TensorError> {
        let a = self.expect_matrix("mean_rows")?;
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; n];
        for row in a.iter_rows() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let denom = m.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= denom);
        Self::matrix(1, n, out)
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(|r| dot(r, r).sqrt()).collect()
    }

    fn expect_matrix(&self, op: &'static str) -> Result<&Self, TensorError> {
        if self.is_matrix() {
            Ok(self)
        } else {
            Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            })
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    L2NormalizeRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Diag(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs have lower
/// indices than the node itself and reverse index order is a valid reverse
/// topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Accumulated gradient for `var`, or `None` when the loss does not depend on it
    /// through any trainable path.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, materialized as zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose()?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push_op(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if !av.is_matrix() || rv.shape() != [1, av.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let mut value = av.clone();
        let n = av.cols();
        if n > 0 {
            for chunk in value.data.chunks_mut(n) {
                for (v, b) in chunk.iter_mut().zip(&rv.data) {
                    *v += b;
                }
            }
        }
        Ok(self.push_op(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).l2_normalize_rows()?;
        Ok(self.push_op(value, Op::L2NormalizeRows(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.push_op(value, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).log_softmax_rows()?;
        Ok(self.push_op(value, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Elementwise `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.push_op(value, Op::Log(a, floor), &[a])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).mean_rows()?;
        Ok(self.push_op(value, Op::MeanRows(a), &[a]))
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if !t.is_matrix() || t.rows() != t.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "diag",
                left: t.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let n = t.rows();
        let value = Tensor::matrix(n, 1, (0..n).map(|i| t.get(i, i)).collect())?;
        Ok(self.push_op(value, Op::Diag(a), &[a]))
    }

    /// Looks up rows of `table`; backward scatters additively into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(table).select_rows(indices)?;
        Ok(self.push_op(value, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Accumulators are freshly zeroed on every call and the tape itself is not
    /// modified, so calling this twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 || !(loss_value.is_scalar() || loss_value.shape().iter().all(|&d| d == 1)) {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.zip_map(self.value(*b), "mul", |gv, bv| gv * bv)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = g.zip_map(self.value(*a), "mul", |gv, av| gv * av)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, g.map(|v| v * factor));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in g.iter_rows() {
                        for (s, v) in col_sums.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, g.cols(), col_sums)?);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a) => {
                // dx = (g - y·(y·g)) / ‖x‖
                let x = self.value(*a);
                let mut ga = g.clone();
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let norm = dot(xr, xr).sqrt();
                    let yr = y.row(i);
                    let proj = dot(yr, g.row(i));
                    for (out, &yv) in ga.row_mut(i).iter_mut().zip(yr) {
                        *out = (*out - yv * proj) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let inner = dot(yr, g.row(i));
                    for (out, &yv) in ga.row_mut(i).iter_mut().zip(yr) {
                        *out = yv * (*out - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for (out, &yv) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                        *out -= yv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a, floor) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "log", |gv, xv| if xv > *floor { gv / xv } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(shape, g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let scale = g.item() / x.len().max(1) as f64;
                self.accumulate(grads, *a, Tensor::filled(x.shape().to_vec(), scale));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let m = x.rows().max(1) as f64;
                let mut ga = Tensor::zeros(x.shape().to_vec());
                for i in 0..x.rows() {
                    for (out, &gv) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                        *out = gv / m;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Diag(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.shape().to_vec());
                for i in 0..x.rows() {
                    ga.set(i, i, g.get(i, 0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, indices) => {
                let t = self.value(*table);
                let mut gt = Tensor::zeros(t.shape().to_vec());
                for (out_row, &src) in indices.iter().enumerate() {
                    for (acc, &gv) in gt.row_mut(src).iter_mut().zip(g.row(out_row)) {
                        *acc += gv;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(g.rows() * cols);
                        for r in g.iter_rows() {
                            gp.extend_from_slice(&r[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(g.rows(), cols, gp)?);
                    }
                    offset += cols;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
