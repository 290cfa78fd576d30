//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every primitive in execution order; a [`Var`] is a
//! handle into it. Gradients come in two flavors:
//!
//! * [`Tape::gradient`] runs a plain numeric reverse sweep.
//! * [`Tape::grad_graph`] records the reverse sweep itself as new tape
//!   nodes, so the resulting gradient can be differentiated again. The
//!   Hamiltonian vector field uses this: it contains `∂H/∂z`, and training
//!   needs the loss gradient through it.
//!
//! Handles are only meaningful on the tape that created them.

use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("gradient output must be 1x1, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// A fixed linear map applied to tape values, e.g. a sparse adjacency.
pub trait LinearOperator {
    /// `(rows, cols)` of the operator.
    fn shape(&self) -> (usize, usize);
    fn apply(&self, x: &Matrix) -> Matrix;
    fn apply_transpose(&self, x: &Matrix) -> Matrix;
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    /// `scale * a + shift`, elementwise.
    Affine {
        a: usize,
        scale: f64,
    },
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    RowSum(usize),
    ColSum(usize),
    SumAll(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    ConcatCols(usize, usize),
    SliceCols {
        a: usize,
        start: usize,
    },
    PadCols {
        a: usize,
        offset: usize,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    PadRows {
        a: usize,
        offset: usize,
    },
    Linear {
        map: Rc<dyn LinearOperator>,
        a: usize,
        transposed: bool,
    },
    /// `X = K^{-1} B`, value of the node is `X`.
    Solve {
        k: usize,
        b: usize,
    },
    /// Mean cross-entropy over selected rows. `grad` holds
    /// `(softmax - onehot) / |rows|` on the selected rows.
    SoftmaxCe {
        logits: usize,
        grad: Rc<Matrix>,
    },
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ConcatCols(a, b) => vec![*a, *b],
            Solve { k, b } => vec![*k, *b],
            Affine { a, .. }
            | Transpose(a)
            | Tanh(a)
            | Relu(a)
            | RowSum(a)
            | ColSum(a)
            | SumAll(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | SliceCols { a, .. }
            | PadCols { a, .. }
            | SliceRows { a, .. }
            | PadRows { a, .. }
            | Linear { a, .. } => vec![*a],
            SoftmaxCe { logits, .. } => vec![*logits],
            ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only record of matrix computations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn mismatch(op: &'static str, lhs: &Matrix, rhs: &Matrix) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
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

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Const, value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .val(a.0)
            .try_add(self.val(b.0))
            .map_err(|_| mismatch("add", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .val(a.0)
            .try_sub(self.val(b.0))
            .map_err(|_| mismatch("sub", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.val(a.0).map(|x| scale * x + shift);
        self.push(Op::Affine { a: a.0, scale }, v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .val(a.0)
            .hadamard(self.val(b.0))
            .map_err(|_| mismatch("mul", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .val(a.0)
            .matmul(self.val(b.0))
            .map_err(|_| mismatch("matmul", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a.0).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(f64::tanh);
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    /// `n x c -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.val(a.0);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        self.push(Op::RowSum(a.0), v)
    }

    /// `n x c -> 1 x c`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = col_sum(self.val(a.0));
        self.push(Op::ColSum(a.0), v)
    }

    /// `n x c -> 1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.val(a.0).sum());
        self.push(Op::SumAll(a.0), v)
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let m = self.val(a.0);
        if m.rows() != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "broadcast_rows",
                msg: format!("expected a single row, got {:?}", m.shape()),
            });
        }
        let v = Matrix::from_fn(rows, m.cols(), |_, j| m[(0, j)]);
        Ok(self.push(Op::BroadcastRows(a.0), v))
    }

    /// Repeats an `n x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let m = self.val(a.0);
        if m.cols() != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "broadcast_cols",
                msg: format!("expected a single column, got {:?}", m.shape()),
            });
        }
        let v = Matrix::from_fn(m.rows(), cols, |i, _| m[(i, 0)]);
        Ok(self.push(Op::BroadcastCols(a.0), v))
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let rows = self.val(a.0).rows();
        let b = self.broadcast_rows(bias, rows)?;
        self.add(a, b)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .val(a.0)
            .hstack(self.val(b.0))
            .map_err(|_| mismatch("concat_cols", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::ConcatCols(a.0, b.0), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.val(a.0);
        if start > end || end > m.cols() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} out of {} columns", m.cols()),
            });
        }
        let v = m.slice_cols(start, end);
        Ok(self.push(Op::SliceCols { a: a.0, start }, v))
    }

    fn pad_cols(&mut self, a: Var, offset: usize, total: usize) -> Var {
        let v = pad_cols(self.val(a.0), offset, total);
        self.push(Op::PadCols { a: a.0, offset }, v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        }
        let blocks: Vec<&Matrix> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Matrix::vstack(&blocks).map_err(|_| AutodiffError::InvalidArgument {
            op: "concat_rows",
            msg: "column counts differ".into(),
        })?;
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.val(a.0);
        if start > end || end > m.rows() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of {} rows", m.rows()),
            });
        }
        let v = m.slice_rows(start, end);
        Ok(self.push(Op::SliceRows { a: a.0, start }, v))
    }

    fn pad_rows(&mut self, a: Var, offset: usize, total: usize) -> Var {
        let v = pad_rows(self.val(a.0), offset, total);
        self.push(Op::PadRows { a: a.0, offset }, v)
    }

    /// Applies a fixed linear operator: `map · a`.
    pub fn linear(&mut self, map: Rc<dyn LinearOperator>, a: Var) -> Result<Var> {
        self.linear_impl(map, a, false)
    }

    fn linear_impl(&mut self, map: Rc<dyn LinearOperator>, a: Var, transposed: bool) -> Result<Var> {
        let (r, c) = map.shape();
        let expect = if transposed { r } else { c };
        let m = self.val(a.0);
        if m.rows() != expect {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                lhs: (r, c),
                rhs: m.shape(),
            });
        }
        let v = if transposed { map.apply_transpose(m) } else { map.apply(m) };
        Ok(self.push(
            Op::Linear {
                map,
                a: a.0,
                transposed,
            },
            v,
        ))
    }

    /// `K^{-1} B` for square `K`.
    pub fn solve(&mut self, k: Var, b: Var) -> Result<Var> {
        let v = linalg::solve(self.val(k.0), self.val(b.0))?;
        Ok(self.push(Op::Solve { k: k.0, b: b.0 }, v))
    }

    /// Mean softmax cross-entropy of `logits` over the rows in `rows`.
    ///
    /// The recorded derivative treats the softmax probabilities as fixed, so
    /// differentiating the gradient of this node a second time is not
    /// supported. It is meant to be the last node of a loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
        let z = self.val(logits.0);
        if labels.len() != z.rows() {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), z.rows()),
            });
        }
        if rows.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: "empty row selection".into(),
            });
        }
        let c = z.cols();
        let inv = 1.0 / rows.len() as f64;
        let mut grad = Matrix::zeros(z.rows(), c);
        let mut loss = 0.0;
        for &i in rows {
            let label = labels[i];
            if label >= c {
                return Err(AutodiffError::InvalidArgument {
                    op: "softmax_cross_entropy",
                    msg: format!("label {label} out of {c} classes"),
                });
            }
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            loss += lse - row[label];
            let g = grad.row_mut(i);
            for j in 0..c {
                g[j] = (row[j] - lse).exp() * inv;
            }
            g[label] -= inv;
        }
        let v = Matrix::filled(1, 1, loss * inv);
        Ok(self.push(
            Op::SoftmaxCe {
                logits: logits.0,
                grad: Rc::new(grad),
            },
            v,
        ))
    }

    /// Marks which nodes in `lo..=hi` depend on any of `wrt`.
    fn dependency_mask(&self, lo: usize, hi: usize, wrt: &[Var]) -> Vec<bool> {
        let mut dep = vec![false; hi + 1 - lo];
        for w in wrt {
            if w.0 >= lo && w.0 <= hi {
                dep[w.0 - lo] = true;
            }
        }
        for i in lo..=hi {
            if dep[i - lo] {
                continue;
            }
            dep[i - lo] = self.nodes[i]
                .op
                .operands()
                .iter()
                .any(|&o| o >= lo && dep[o - lo]);
        }
        dep
    }

    fn check_scalar(&self, output: Var) -> Result<()> {
        let shape = self.val(output.0).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        Ok(())
    }

    /// Numeric reverse sweep. Parameters that `output` does not depend on get
    /// exact zeros.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        self.check_scalar(output)?;
        let Some(lo) = wrt.iter().map(|w| w.0).min() else {
            return Ok(vec![]);
        };
        let hi = output.0;
        if lo > hi {
            return Ok(wrt.iter().map(|w| zeros_like(self.val(w.0))).collect());
        }
        let dep = self.dependency_mask(lo, hi, wrt);
        let mut adj: Vec<Option<Matrix>> = vec![None; hi + 1 - lo];
        adj[hi - lo] = Some(Matrix::filled(1, 1, 1.0));
        for i in (lo..=hi).rev() {
            if !dep[i - lo] {
                continue;
            }
            let Some(g) = adj[i - lo].take() else { continue };
            let keep = g.clone();
            self.backprop_numeric(i, &g, &mut |o, contrib| {
                if o >= lo && dep[o - lo] {
                    match &mut adj[o - lo] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            })?;
            adj[i - lo] = Some(keep);
        }
        Ok(wrt
            .iter()
            .map(|w| {
                if w.0 > hi {
                    return zeros_like(self.val(w.0));
                }
                adj[w.0 - lo].clone().unwrap_or_else(|| zeros_like(self.val(w.0)))
            })
            .collect())
    }

    fn backprop_numeric(&self, i: usize, g: &Matrix, emit: &mut dyn FnMut(usize, Matrix)) -> Result<()> {
        use Op::*;
        let out = self.val(i);
        match &self.nodes[i].op {
            Leaf | Const => {}
            Add(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Sub(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.scale(-1.0));
            }
            Affine { a, scale, .. } => emit(*a, g.scale(*scale)),
            Mul(a, b) => {
                emit(*a, g.hadamard(self.val(*b))?);
                emit(*b, g.hadamard(self.val(*a))?);
            }
            MatMul(a, b) => {
                emit(*a, g.matmul(&self.val(*b).transpose())?);
                emit(*b, self.val(*a).transpose().matmul(g)?);
            }
            Transpose(a) => emit(*a, g.transpose()),
            Tanh(a) => emit(*a, g.zip_map(out, "tanh'", |g, y| g * (1.0 - y * y))?),
            Relu(a) => emit(
                *a,
                g.zip_map(self.val(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?,
            ),
            RowSum(a) => {
                let cols = self.val(*a).cols();
                emit(*a, Matrix::from_fn(g.rows(), cols, |r, _| g[(r, 0)]));
            }
            ColSum(a) => {
                let rows = self.val(*a).rows();
                emit(*a, Matrix::from_fn(rows, g.cols(), |_, c| g[(0, c)]));
            }
            SumAll(a) => {
                let (r, c) = self.val(*a).shape();
                emit(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
            BroadcastRows(a) => emit(*a, col_sum(g)),
            BroadcastCols(a) => emit(*a, Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum())),
            ConcatCols(a, b) => {
                let ca = self.val(*a).cols();
                emit(*a, g.slice_cols(0, ca));
                emit(*b, g.slice_cols(ca, g.cols()));
            }
            SliceCols { a, start, .. } => emit(*a, pad_cols(g, *start, self.val(*a).cols())),
            PadCols { a, offset, .. } => {
                let w = self.val(*a).cols();
                emit(*a, g.slice_cols(*offset, offset + w));
            }
            ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    emit(p, g.slice_rows(at, at + r));
                    at += r;
                }
            }
            SliceRows { a, start, .. } => emit(*a, pad_rows(g, *start, self.val(*a).rows())),
            PadRows { a, offset, .. } => {
                let h = self.val(*a).rows();
                emit(*a, g.slice_rows(*offset, offset + h));
            }
            Linear { map, a, transposed } => {
                emit(*a, if *transposed { map.apply(g) } else { map.apply_transpose(g) })
            }
            Solve { k, b } => {
                let gb = linalg::solve(&self.val(*k).transpose(), g)?;
                emit(*k, gb.matmul(&out.transpose())?.scale(-1.0));
                emit(*b, gb);
            }
            SoftmaxCe { logits, grad } => emit(*logits, grad.scale(g[(0, 0)])),
        }
        Ok(())
    }

    /// Reverse sweep recorded on the tape. The returned handles are
    /// differentiable functions of every input of the original computation.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_scalar(output)?;
        let Some(lo) = wrt.iter().map(|w| w.0).min() else {
            return Ok(vec![]);
        };
        let hi = output.0;
        let dep = if lo <= hi {
            self.dependency_mask(lo, hi, wrt)
        } else {
            vec![]
        };
        let mut adj: Vec<Option<Var>> = vec![None; (hi + 1).saturating_sub(lo)];
        if lo <= hi {
            let one = self.constant(Matrix::filled(1, 1, 1.0));
            adj[hi - lo] = Some(one);
            for i in (lo..=hi).rev() {
                if !dep[i - lo] {
                    continue;
                }
                let Some(g) = adj[i - lo] else { continue };
                let mut contribs: Vec<(usize, Var)> = Vec::new();
                self.backprop_graph(i, g, &mut |o, v| {
                    if o >= lo && dep[o - lo] {
                        contribs.push((o, v));
                    }
                })?;
                for (o, v) in contribs {
                    adj[o - lo] = Some(match adj[o - lo] {
                        Some(acc) => self.add(acc, v)?,
                        None => v,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                if w.0 >= lo && w.0 <= hi {
                    if let Some(v) = adj[w.0 - lo] {
                        return v;
                    }
                }
                let z = zeros_like(self.val(w.0));
                self.constant(z)
            })
            .collect())
    }

    /// Emits recorded adjoint contributions for the operands of node `i`.
    fn backprop_graph(&mut self, i: usize, g: Var, emit: &mut dyn FnMut(usize, Var)) -> Result<()> {
        use Op::*;
        let op = self.nodes[i].op.clone();
        match op {
            Leaf | Const => {}
            Add(a, b) => {
                emit(a, g);
                emit(b, g);
            }
            Sub(a, b) => {
                emit(a, g);
                let n = self.neg(g);
                emit(b, n);
            }
            Affine { a, scale, .. } => {
                let s = self.scale(g, scale);
                emit(a, s);
            }
            Mul(a, b) => {
                let ga = self.mul(g, Var(b))?;
                emit(a, ga);
                let gb = self.mul(g, Var(a))?;
                emit(b, gb);
            }
            MatMul(a, b) => {
                let bt = self.transpose(Var(b));
                let ga = self.matmul(g, bt)?;
                emit(a, ga);
                let at = self.transpose(Var(a));
                let gb = self.matmul(at, g)?;
                emit(b, gb);
            }
            Transpose(a) => {
                let t = self.transpose(g);
                emit(a, t);
            }
            Tanh(a) => {
                let y = Var(i);
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -1.0, 1.0);
                let ga = self.mul(g, d)?;
                emit(a, ga);
            }
            Relu(a) => {
                let mask = self.val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let ga = self.mul(g, m)?;
                emit(a, ga);
            }
            RowSum(a) => {
                let cols = self.val(a).cols();
                let ga = self.broadcast_cols(g, cols)?;
                emit(a, ga);
            }
            ColSum(a) => {
                let rows = self.val(a).rows();
                let ga = self.broadcast_rows(g, rows)?;
                emit(a, ga);
            }
            SumAll(a) => {
                let (r, c) = self.val(a).shape();
                let row = self.broadcast_cols(g, c)?;
                let ga = self.broadcast_rows(row, r)?;
                emit(a, ga);
            }
            BroadcastRows(a) => {
                let ga = self.col_sum(g);
                emit(a, ga);
            }
            BroadcastCols(a) => {
                let ga = self.row_sum(g);
                emit(a, ga);
            }
            ConcatCols(a, b) => {
                let ca = self.val(a).cols();
                let total = self.val(i).cols();
                let ga = self.slice_cols(g, 0, ca)?;
                emit(a, ga);
                let gb = self.slice_cols(g, ca, total)?;
                emit(b, gb);
            }
            SliceCols { a, start, .. } => {
                let total = self.val(a).cols();
                let ga = self.pad_cols(g, start, total);
                emit(a, ga);
            }
            PadCols { a, offset, .. } => {
                let w = self.val(a).cols();
                let ga = self.slice_cols(g, offset, offset + w)?;
                emit(a, ga);
            }
            ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let r = self.val(p).rows();
                    let gp = self.slice_rows(g, at, at + r)?;
                    emit(p, gp);
                    at += r;
                }
            }
            SliceRows { a, start, .. } => {
                let total = self.val(a).rows();
                let ga = self.pad_rows(g, start, total);
                emit(a, ga);
            }
            PadRows { a, offset, .. } => {
                let h = self.val(a).rows();
                let ga = self.slice_rows(g, offset, offset + h)?;
                emit(a, ga);
            }
            Linear { map, a, transposed } => {
                let ga = self.linear_impl(map, g, !transposed)?;
                emit(a, ga);
            }
            Solve { k, b } => {
                let kt = self.transpose(Var(k));
                let gb = self.solve(kt, g)?;
                let xt = self.transpose(Var(i));
                let prod = self.matmul(gb, xt)?;
                let gk = self.neg(prod);
                emit(k, gk);
                emit(b, gb);
            }
            SoftmaxCe { logits, grad } => {
                let (r, c) = grad.shape();
                let p = self.constant((*grad).clone());
                let row = self.broadcast_cols(g, c)?;
                let full = self.broadcast_rows(row, r)?;
                let ga = self.mul(p, full)?;
                emit(logits, ga);
            }
        }
        Ok(())
    }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn col_sum(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

fn pad_cols(m: &Matrix, offset: usize, total: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), total);
    for i in 0..m.rows() {
        out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
    }
    out
}

fn pad_rows(m: &Matrix, offset: usize, total: usize) -> Matrix {
    let mut out = Matrix::zeros(total, m.cols());
    let c = m.cols();
    out.as_mut_slice()[offset * c..(offset + m.rows()) * c].copy_from_slice(m.as_slice());
    out
}

/// Central differences `(f(X + hE_ij) - f(X - hE_ij)) / 2h` for every entry.
pub fn finite_difference_gradient(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        out.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    out
}
