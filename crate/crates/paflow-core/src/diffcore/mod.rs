//! Reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records the forward computation eagerly (each op stores its
//! output value) and [`Tape::backward`] replays it in reverse to produce
//! exact adjoints of a scalar output with respect to any tracked leaf.
//! The op set is exactly what the network modules need: affine maps,
//! elementwise nonlinearities, softmax (plain and per-segment), row
//! reductions, Euclidean row norms, concatenation, and gathers/scatters
//! over edge lists. No control flow is differentiated; graph construction
//! happens outside the tape and enters as index payloads.
//!
//! Gradients flow only through nodes reachable from tracked leaves
//! ([`Tape::var`]); everything hanging off [`Tape::constant`] is skipped in
//! the backward pass.

mod check;

pub use check::{check_gradient, evaluate_with_gradient, GradCheckReport, GradientReport};

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("non-finite value produced by op {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1x1 scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("index {index} out of bounds for {op} over {len} rows")]
    IndexOutOfBounds { op: &'static str, index: usize, len: usize },
    #[error("segment rows must be grouped contiguously for {op}")]
    UnsortedSegments { op: &'static str },
    #[error("head count {heads} does not divide width {width}")]
    BadHeads { heads: usize, width: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<S> {
    Var,
    Const,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, S),
    AddScalar(TensorId, S),
    MatMul(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Relu(TensorId),
    ShiftedSoftplus(TensorId),
    Logistic(TensorId),
    Ln(TensorId),
    Sin(TensorId),
    Clamp(TensorId, S, S),
    SoftmaxRows(TensorId),
    SegmentSoftmax { input: TensorId, starts: Vec<usize> },
    SegmentSum { input: TensorId, seg_of_row: Vec<usize> },
    Gather { input: TensorId, idx: Vec<usize> },
    ConcatCols { inputs: Vec<TensorId>, offsets: Vec<usize> },
    ConcatRows { inputs: Vec<TensorId>, offsets: Vec<usize> },
    RowNorms(TensorId),
    MulColBroadcast(TensorId, TensorId),
    MulHeadBroadcast { values: TensorId, weights: TensorId, head_dim: usize },
    SumAll(TensorId),
    MeanAll(TensorId),
    EdgeFeatures { dist: TensorId, edge_type: Vec<usize>, centers: Vec<S>, sigma: S },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Var => "var",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::ShiftedSoftplus(..) => "shifted_softplus",
            Op::Logistic(..) => "logistic",
            Op::Ln(..) => "ln",
            Op::Sin(..) => "sin",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Gather { .. } => "gather",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::RowNorms(..) => "row_norms",
            Op::MulColBroadcast(..) => "mul_col_broadcast",
            Op::MulHeadBroadcast { .. } => "mul_head_broadcast",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::EdgeFeatures { .. } => "edge_features",
        }
    }
}

struct Node<S> {
    op: Op<S>,
    value: Array2<S>,
    needs_grad: bool,
}

/// Recorded computation. One tape per evaluation; replaying the same
/// program on the same inputs reproduces identical values.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints from a backward pass, indexed by node id.
pub struct Gradients<S> {
    adjoints: Vec<Option<Array2<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Adjoint of `id`, zeros if the node did not influence the output.
    pub fn wrt(&self, tape: &Tape<S>, id: TensorId) -> Array2<S> {
        match &self.adjoints[id.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf: adjoints are computed with respect to it.
    pub fn var(&mut self, value: Array2<S>) -> TensorId {
        self.push_raw(Op::Var, value, true)
    }

    /// Untracked leaf: gradients do not flow into it.
    pub fn constant(&mut self, value: Array2<S>) -> TensorId {
        self.push_raw(Op::Const, value, false)
    }

    /// 1x1 constant.
    pub fn scalar_const(&mut self, value: S) -> TensorId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, id: TensorId) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: TensorId) -> S {
        self.nodes[id.0].value[(0, 0)]
    }

    fn push_raw(&mut self, op: Op<S>, value: Array2<S>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { op, value, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<S>, value: Array2<S>) -> Result<TensorId, TapeError> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        let needs_grad = self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push_raw(op, value, needs_grad))
    }

    fn op_inputs(&self, op: &Op<S>) -> Vec<TensorId> {
        match op {
            Op::Var | Op::Const => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulColBroadcast(a, b) => vec![*a, *b],
            Op::MulHeadBroadcast { values, weights, .. } => vec![*values, *weights],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::ShiftedSoftplus(a)
            | Op::Logistic(a)
            | Op::Ln(a)
            | Op::Sin(a)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::RowNorms(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::SegmentSoftmax { input, .. }
            | Op::SegmentSum { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::EdgeFeatures { dist, .. } => vec![*dist],
            Op::ConcatCols { inputs, .. } | Op::ConcatRows { inputs, .. } => inputs.clone(),
        }
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TapeError> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op,
                expected: format!("{:?}", sa),
                got: format!("{:?}", sb),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: S) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        if ca != rb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                expected: format!("({ra}, {ca}) x ({ca}, _)"),
                got: format!("({ra}, {ca}) x ({rb}, {cb})"),
            });
        }
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// Broadcast-add a 1xM row (bias) to every row of an NxM array.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, TapeError> {
        let (_, ca) = self.value(a).dim();
        let (rr, cr) = self.value(row).dim();
        if rr != 1 || cr != ca {
            return Err(TapeError::ShapeMismatch {
                op: "add_row",
                expected: format!("(1, {ca})"),
                got: format!("({rr}, {cr})"),
            });
        }
        let v = self.value(a) + &self.value(row).row(0);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| x.max(S::zero()));
        self.push(Op::Relu(a), v)
    }

    /// ln(1 + e^x) − ln 2, the softplus shifted to pass through the origin.
    pub fn shifted_softplus(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ln2 = S::of(std::f64::consts::LN_2);
        let v = self.value(a).mapv(|x| softplus(x) - ln2);
        self.push(Op::ShiftedSoftplus(a), v)
    }

    pub fn logistic(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(logistic_scalar);
        self.push(Op::Logistic(a), v)
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| x.ln());
        self.push(Op::Ln(a), v)
    }

    pub fn sin(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| x.sin());
        self.push(Op::Sin(a), v)
    }

    /// Elementwise clamp into [lo, hi]; subgradient is pass-through inside
    /// the interval (boundary included) and zero outside.
    pub fn clamp(&mut self, a: TensorId, lo: S, hi: S) -> Result<TensorId, TapeError> {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.iter().cloned().sum::<S>();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Column-wise softmax within contiguous row segments. `starts` holds
    /// the first row of each segment plus a final sentinel equal to the row
    /// count.
    pub fn segment_softmax(&mut self, a: TensorId, starts: Vec<usize>) -> Result<TensorId, TapeError> {
        let (rows, _) = self.value(a).dim();
        if starts.first() != Some(&0)
            || starts.last() != Some(&rows)
            || starts.windows(2).any(|w| w[1] < w[0])
        {
            return Err(TapeError::UnsortedSegments { op: "segment_softmax" });
        }
        let mut v = self.value(a).clone();
        segment_softmax_forward(&mut v, &starts);
        self.push(Op::SegmentSoftmax { input: a, starts }, v)
    }

    /// Scatter-add rows into `n_segments` output rows.
    pub fn segment_sum(
        &mut self,
        a: TensorId,
        seg_of_row: Vec<usize>,
        n_segments: usize,
    ) -> Result<TensorId, TapeError> {
        let (rows, cols) = self.value(a).dim();
        if seg_of_row.len() != rows {
            return Err(TapeError::ShapeMismatch {
                op: "segment_sum",
                expected: format!("{rows} segment ids"),
                got: format!("{}", seg_of_row.len()),
            });
        }
        if let Some(&bad) = seg_of_row.iter().find(|&&s| s >= n_segments) {
            return Err(TapeError::IndexOutOfBounds { op: "segment_sum", index: bad, len: n_segments });
        }
        let mut v = Array2::zeros((n_segments, cols));
        for (r, &seg) in seg_of_row.iter().enumerate() {
            let mut out = v.row_mut(seg);
            out += &self.value(a).row(r);
        }
        self.push(Op::SegmentSum { input: a, seg_of_row }, v)
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId, TapeError> {
        let (rows, cols) = self.value(a).dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TapeError::IndexOutOfBounds { op: "gather", index: bad, len: rows });
        }
        let mut v = Array2::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&self.value(a).row(i));
        }
        self.push(Op::Gather { input: a, idx }, v)
    }

    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId, TapeError> {
        let rows = self.value(inputs[0]).nrows();
        let mut offsets = vec![0usize];
        for &id in inputs {
            if self.value(id).nrows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("{rows} rows"),
                    got: format!("{}", self.value(id).nrows()),
                });
            }
            offsets.push(offsets.last().unwrap() + self.value(id).ncols());
        }
        let mut v = Array2::zeros((rows, *offsets.last().unwrap()));
        for (k, &id) in inputs.iter().enumerate() {
            v.slice_mut(ndarray::s![.., offsets[k]..offsets[k + 1]]).assign(self.value(id));
        }
        self.push(Op::ConcatCols { inputs: inputs.to_vec(), offsets }, v)
    }

    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId, TapeError> {
        let cols = self.value(inputs[0]).ncols();
        let mut offsets = vec![0usize];
        for &id in inputs {
            if self.value(id).ncols() != cols {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    expected: format!("{cols} cols"),
                    got: format!("{}", self.value(id).ncols()),
                });
            }
            offsets.push(offsets.last().unwrap() + self.value(id).nrows());
        }
        let mut v = Array2::zeros((*offsets.last().unwrap(), cols));
        for (k, &id) in inputs.iter().enumerate() {
            v.slice_mut(ndarray::s![offsets[k]..offsets[k + 1], ..]).assign(self.value(id));
        }
        self.push(Op::ConcatRows { inputs: inputs.to_vec(), offsets }, v)
    }

    /// Euclidean norm of each row, Nx1. The adjoint at a zero row is the
    /// zero vector, which protects coincident-point edges.
    pub fn row_norms(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = Array2::from_shape_fn((self.value(a).nrows(), 1), |(r, _)| {
            self.value(a).row(r).iter().map(|&x| x * x).sum::<S>().sqrt()
        });
        self.push(Op::RowNorms(a), v)
    }

    /// Multiply every column of an NxD array by an Nx1 column.
    pub fn mul_col_broadcast(&mut self, a: TensorId, col: TensorId) -> Result<TensorId, TapeError> {
        let (ra, _) = self.value(a).dim();
        let (rc, cc) = self.value(col).dim();
        if rc != ra || cc != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "mul_col_broadcast",
                expected: format!("({ra}, 1)"),
                got: format!("({rc}, {cc})"),
            });
        }
        let v = self.value(a) * self.value(col);
        self.push(Op::MulColBroadcast(a, col), v)
    }

    /// Multiply an ExD value array by per-head ExH weights; head h scales
    /// the contiguous column block of width D/H.
    pub fn mul_head_broadcast(
        &mut self,
        values: TensorId,
        weights: TensorId,
    ) -> Result<TensorId, TapeError> {
        let (rv, cv) = self.value(values).dim();
        let (rw, heads) = self.value(weights).dim();
        if rv != rw {
            return Err(TapeError::ShapeMismatch {
                op: "mul_head_broadcast",
                expected: format!("({rv}, _)"),
                got: format!("({rw}, {heads})"),
            });
        }
        if heads == 0 || cv % heads != 0 {
            return Err(TapeError::BadHeads { heads, width: cv });
        }
        let head_dim = cv / heads;
        let v = Array2::from_shape_fn((rv, cv), |(r, c)| {
            self.value(values)[(r, c)] * self.value(weights)[(r, c / head_dim)]
        });
        self.push(Op::MulHeadBroadcast { values, weights, head_dim }, v)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let v = Array2::from_elem((1, 1), self.value(a).iter().cloned().sum::<S>());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let len = S::of_usize(self.value(a).len());
        let v = Array2::from_elem((1, 1), self.value(a).iter().cloned().sum::<S>() / len);
        self.push(Op::MeanAll(a), v)
    }

    /// Radial-basis expansion of per-edge distances placed into the column
    /// block of the edge's type: out[e, type·M + m] = exp(−(d − μ_m)²/2σ²).
    pub fn edge_features(
        &mut self,
        dist: TensorId,
        edge_type: Vec<usize>,
        centers: Vec<S>,
        sigma: S,
        n_types: usize,
    ) -> Result<TensorId, TapeError> {
        let (rows, cols) = self.value(dist).dim();
        if cols != 1 || edge_type.len() != rows {
            return Err(TapeError::ShapeMismatch {
                op: "edge_features",
                expected: format!("({rows}, 1) distances with {rows} types"),
                got: format!("({rows}, {cols}) with {}", edge_type.len()),
            });
        }
        if let Some(&bad) = edge_type.iter().find(|&&t| t >= n_types) {
            return Err(TapeError::IndexOutOfBounds { op: "edge_features", index: bad, len: n_types });
        }
        let m = centers.len();
        let mut v = Array2::zeros((rows, n_types * m));
        for r in 0..rows {
            let d = self.value(dist)[(r, 0)];
            let base = edge_type[r] * m;
            for (j, &mu) in centers.iter().enumerate() {
                let z = (d - mu) / sigma;
                v[(r, base + j)] = (-(z * z) / S::of(2.0)).exp();
            }
        }
        self.push(Op::EdgeFeatures { dist, edge_type, centers, sigma }, v)
    }

    /// Reverse pass from a 1x1 output node.
    pub fn backward(&self, output: TensorId) -> Result<Gradients<S>, TapeError> {
        let (rows, cols) = self.value(output).dim();
        if (rows, cols) != (1, 1) {
            return Err(TapeError::NonScalarOutput { rows, cols });
        }
        let mut adj: Vec<Option<Array2<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Array2::from_elem((1, 1), S::one()));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad || adj[i].is_none() {
                continue;
            }
            let g = adj[i].take().unwrap();
            self.accumulate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn bump(&self, adj: &mut [Option<Array2<S>>], id: TensorId, delta: &Array2<S>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(a) => *a += delta,
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, g: &Array2<S>, adj: &mut Vec<Option<Array2<S>>>) {
        let val = |id: TensorId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Var | Op::Const => {}
            Op::Add(a, b) => {
                self.bump(adj, *a, g);
                self.bump(adj, *b, g);
            }
            Op::Sub(a, b) => {
                self.bump(adj, *a, g);
                self.bump(adj, *b, &g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.bump(adj, *a, &(g * val(*b)));
                self.bump(adj, *b, &(g * val(*a)));
            }
            Op::Neg(a) => self.bump(adj, *a, &g.mapv(|x| -x)),
            Op::Scale(a, c) => self.bump(adj, *a, &g.mapv(|x| x * *c)),
            Op::AddScalar(a, _) => self.bump(adj, *a, g),
            Op::MatMul(a, b) => {
                self.bump(adj, *a, &g.dot(&val(*b).t()));
                self.bump(adj, *b, &val(*a).t().dot(g));
            }
            Op::AddRow(a, row) => {
                self.bump(adj, *a, g);
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.bump(adj, *row, &summed);
            }
            Op::Relu(a) => {
                let mask = val(*a).mapv(|x| if x > S::zero() { S::one() } else { S::zero() });
                self.bump(adj, *a, &(g * &mask));
            }
            Op::ShiftedSoftplus(a) => {
                let d = val(*a).mapv(logistic_scalar);
                self.bump(adj, *a, &(g * &d));
            }
            Op::Logistic(_) => {
                let y = &self.nodes[i].value;
                let d = y.mapv(|v| v * (S::one() - v));
                if let Op::Logistic(a) = &self.nodes[i].op {
                    self.bump(adj, *a, &(g * &d));
                }
            }
            Op::Ln(a) => {
                let d = val(*a).mapv(|x| S::one() / x);
                self.bump(adj, *a, &(g * &d));
            }
            Op::Sin(a) => {
                let d = val(*a).mapv(|x| x.cos());
                self.bump(adj, *a, &(g * &d));
            }
            Op::Clamp(a, lo, hi) => {
                let mask = val(*a).mapv(|x| if x >= *lo && x <= *hi { S::one() } else { S::zero() });
                self.bump(adj, *a, &(g * &mask));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = g * y;
                for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.iter().cloned().sum::<S>();
                    ndarray::Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= dot * yv);
                }
                self.bump(adj, *a, &da);
            }
            Op::SegmentSoftmax { input, starts } => {
                let y = &self.nodes[i].value;
                let mut da = g * y;
                for w in starts.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    for c in 0..y.ncols() {
                        let mut dot = S::zero();
                        for r in lo..hi {
                            dot += da[(r, c)];
                        }
                        for r in lo..hi {
                            da[(r, c)] -= dot * y[(r, c)];
                        }
                    }
                }
                self.bump(adj, *input, &da);
            }
            Op::SegmentSum { input, seg_of_row, .. } => {
                let mut da = Array2::zeros(val(*input).raw_dim());
                for (r, &seg) in seg_of_row.iter().enumerate() {
                    da.row_mut(r).assign(&g.row(seg));
                }
                self.bump(adj, *input, &da);
            }
            Op::Gather { input, idx } => {
                let mut da = Array2::zeros(val(*input).raw_dim());
                for (r, &i_src) in idx.iter().enumerate() {
                    let mut row = da.row_mut(i_src);
                    row += &g.row(r);
                }
                self.bump(adj, *input, &da);
            }
            Op::ConcatCols { inputs, offsets } => {
                for (k, &id) in inputs.iter().enumerate() {
                    let slice = g.slice(ndarray::s![.., offsets[k]..offsets[k + 1]]).to_owned();
                    self.bump(adj, id, &slice);
                }
            }
            Op::ConcatRows { inputs, offsets } => {
                for (k, &id) in inputs.iter().enumerate() {
                    let slice = g.slice(ndarray::s![offsets[k]..offsets[k + 1], ..]).to_owned();
                    self.bump(adj, id, &slice);
                }
            }
            Op::RowNorms(a) => {
                let y = &self.nodes[i].value;
                let x = val(*a);
                let mut da = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let norm = y[(r, 0)];
                    if norm > S::zero() {
                        let scale = g[(r, 0)] / norm;
                        for c in 0..x.ncols() {
                            da[(r, c)] = x[(r, c)] * scale;
                        }
                    }
                }
                self.bump(adj, *a, &da);
            }
            Op::MulColBroadcast(a, col) => {
                let da = g * val(*col);
                self.bump(adj, *a, &da);
                let mut dc = Array2::zeros(val(*col).raw_dim());
                for r in 0..g.nrows() {
                    let mut acc = S::zero();
                    for c in 0..g.ncols() {
                        acc += g[(r, c)] * val(*a)[(r, c)];
                    }
                    dc[(r, 0)] = acc;
                }
                self.bump(adj, *col, &dc);
            }
            Op::MulHeadBroadcast { values, weights, head_dim } => {
                let hd = *head_dim;
                let dv = Array2::from_shape_fn(val(*values).raw_dim(), |(r, c)| {
                    g[(r, c)] * val(*weights)[(r, c / hd)]
                });
                self.bump(adj, *values, &dv);
                let mut dw = Array2::zeros(val(*weights).raw_dim());
                for r in 0..g.nrows() {
                    for c in 0..g.ncols() {
                        dw[(r, c / hd)] += g[(r, c)] * val(*values)[(r, c)];
                    }
                }
                self.bump(adj, *weights, &dw);
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(val(*a).raw_dim(), g[(0, 0)]);
                self.bump(adj, *a, &da);
            }
            Op::MeanAll(a) => {
                let scale = g[(0, 0)] / S::of_usize(val(*a).len());
                let da = Array2::from_elem(val(*a).raw_dim(), scale);
                self.bump(adj, *a, &da);
            }
            Op::EdgeFeatures { dist, edge_type, centers, sigma } => {
                let m = centers.len();
                let y = &self.nodes[i].value;
                let mut dd = Array2::zeros(val(*dist).raw_dim());
                let s2 = *sigma * *sigma;
                for (r, &ty) in edge_type.iter().enumerate() {
                    let d = val(*dist)[(r, 0)];
                    let base = ty * m;
                    let mut acc = S::zero();
                    for (j, &mu) in centers.iter().enumerate() {
                        acc += g[(r, base + j)] * y[(r, base + j)] * (-(d - mu) / s2);
                    }
                    dd[(r, 0)] = acc;
                }
                self.bump(adj, *dist, &dd);
            }
        }
    }
}

fn segment_softmax_forward<S: Real>(v: &mut Array2<S>, starts: &[usize]) {
    for w in starts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        for c in 0..v.ncols() {
            let mut max = S::neg_infinity();
            for r in lo..hi {
                max = max.max(v[(r, c)]);
            }
            let mut sum = S::zero();
            for r in lo..hi {
                let e = (v[(r, c)] - max).exp();
                v[(r, c)] = e;
                sum += e;
            }
            for r in lo..hi {
                v[(r, c)] /= sum;
            }
        }
    }
}

fn softplus<S: Real>(x: S) -> S {
    // Stable for large |x|.
    if x > S::of(30.0) {
        x
    } else if x < S::of(-30.0) {
        x.exp()
    } else {
        (S::one() + x.exp()).ln()
    }
}

fn logistic_scalar<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests;
