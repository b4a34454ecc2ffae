//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in topological order together with
//! whatever forward values its backward rule needs. [`Tape::backward`] sweeps
//! the tape in reverse from a scalar root and returns the adjoint of every
//! node. Everything here is single-threaded and sequential, so replaying the
//! same inputs gives bitwise-identical values and gradients.

use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix::DenseMatrix;

/// Columns with a norm at or below this are rejected by
/// [`Tape::l2_normalize_cols`].
pub const NORMALIZE_MIN_NORM: f64 = 1e-12;

/// Variance epsilon used by [`Tape::batch_standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and for the corrupted-rule test hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Scale,
    Relu,
    AddColumn,
    SubColumn,
    RowMean,
    HConcat,
    ColRange,
    L2NormalizeCols,
    SoftmaxCrossEntropy,
    FrobeniusNorm,
    Sum,
    Trace,
    BatchStandardize,
    StopGradient,
    RegularizeSpd,
    SolveSpd,
    WhitenLower,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::AddColumn => "add_column",
            OpKind::SubColumn => "sub_column",
            OpKind::RowMean => "row_mean",
            OpKind::HConcat => "hconcat",
            OpKind::ColRange => "col_range",
            OpKind::L2NormalizeCols => "l2_normalize_cols",
            OpKind::SoftmaxCrossEntropy => "row_softmax_cross_entropy",
            OpKind::FrobeniusNorm => "frobenius_norm",
            OpKind::Sum => "sum",
            OpKind::Trace => "trace",
            OpKind::BatchStandardize => "batch_standardize",
            OpKind::StopGradient => "stop_gradient",
            OpKind::RegularizeSpd => "regularize_spd",
            OpKind::SolveSpd => "solve_spd",
            OpKind::WhitenLower => "whiten_lower",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 22] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Scale,
    OpKind::Relu,
    OpKind::AddColumn,
    OpKind::SubColumn,
    OpKind::RowMean,
    OpKind::HConcat,
    OpKind::ColRange,
    OpKind::L2NormalizeCols,
    OpKind::SoftmaxCrossEntropy,
    OpKind::FrobeniusNorm,
    OpKind::Sum,
    OpKind::Trace,
    OpKind::BatchStandardize,
    OpKind::StopGradient,
    OpKind::RegularizeSpd,
    OpKind::SolveSpd,
    OpKind::WhitenLower,
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    AddColumn(Var, Var),
    SubColumn(Var, Var),
    RowMean(Var),
    HConcat(Var, Var),
    ColRange {
        input: Var,
        start: usize,
    },
    L2NormalizeCols {
        input: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        exclude_diagonal: bool,
        probs: DenseMatrix,
    },
    FrobeniusNorm(Var),
    Sum(Var),
    Trace(Var),
    BatchStandardize {
        input: Var,
        normalized: DenseMatrix,
        inv_std: Vec<f64>,
    },
    StopGradient(Var),
    RegularizeSpd {
        input: Var,
        scale: f64,
        floored: bool,
    },
    SolveSpd {
        sigma: Var,
        rhs: Var,
        chol: DenseMatrix,
    },
    WhitenLower {
        sigma: Var,
        rhs: Var,
        chol: DenseMatrix,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::AddColumn(..) => OpKind::AddColumn,
            Op::SubColumn(..) => OpKind::SubColumn,
            Op::RowMean(_) => OpKind::RowMean,
            Op::HConcat(..) => OpKind::HConcat,
            Op::ColRange { .. } => OpKind::ColRange,
            Op::L2NormalizeCols { .. } => OpKind::L2NormalizeCols,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::FrobeniusNorm(_) => OpKind::FrobeniusNorm,
            Op::Sum(_) => OpKind::Sum,
            Op::Trace(_) => OpKind::Trace,
            Op::BatchStandardize { .. } => OpKind::BatchStandardize,
            Op::StopGradient(_) => OpKind::StopGradient,
            Op::RegularizeSpd { .. } => OpKind::RegularizeSpd,
            Op::SolveSpd { .. } => OpKind::SolveSpd,
            Op::WhitenLower { .. } => OpKind::WhitenLower,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    corrupted: Option<OpKind>,
}

/// Adjoints produced by [`Tape::backward`], one per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; a zero matrix of the forward shape when no path
    /// reached it.
    pub fn wrt(&self, var: Var) -> DenseMatrix {
        match &self.adjoints[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// True when some path from the root reached `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.adjoints[var.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scales every adjoint produced by the backward rule of
    /// `kind` by 1.5. Used to prove gradient audits can fail.
    pub fn corrupt_backward_rule(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseMatrix {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> Option<f64> {
        self.value(var).as_scalar()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    fn check_column(&self, a: Var, col: Var, op: &'static str) -> Result<()> {
        let (r, _) = self.value(a).shape();
        if self.value(col).shape() != (r, 1) {
            return Err(Error::dim(
                op,
                format!(
                    "expected a {r}x1 column, got {:?}",
                    self.value(col).shape()
                ),
            ));
        }
        Ok(())
    }

    /// `a + col·1ᵀ` where `col` is a column vector (bias broadcast).
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_column(a, col, "add_column")?;
        let (am, cm) = (self.value(a), self.value(col));
        let v = DenseMatrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + cm.get(i, 0));
        Ok(self.push(v, Op::AddColumn(a, col)))
    }

    /// `a − col·1ᵀ` (centering by a mean vector).
    pub fn sub_column(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_column(a, col, "sub_column")?;
        let v = self.value(a).sub_column(self.value(col));
        Ok(self.push(v, Op::SubColumn(a, col)))
    }

    /// Mean over columns of each row, as a column vector.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let v = self.value(a).row_means();
        self.push(v, Op::RowMean(a))
    }

    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hconcat(self.value(b))?;
        Ok(self.push(v, Op::HConcat(a, b)))
    }

    /// Columns `start..end` of `a`.
    pub fn col_range(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start > end || end > cols {
            return Err(Error::dim(
                "col_range",
                format!("range {start}..{end} of {cols} columns"),
            ));
        }
        let v = self.value(a).col_range(start, end);
        Ok(self.push(v, Op::ColRange { input: a, start }))
    }

    /// Divides every column by its Euclidean norm.
    pub fn l2_normalize_cols(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let (r, c) = m.shape();
        let mut norms = Vec::with_capacity(c);
        for j in 0..c {
            let n = (0..r).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
            if !(n > NORMALIZE_MIN_NORM) {
                return Err(Error::DegenerateInput { column: j, norm: n });
            }
            norms.push(n);
        }
        let v = DenseMatrix::from_fn(r, c, |i, j| m.get(i, j) / norms[j]);
        Ok(self.push(v, Op::L2NormalizeCols { input: a, norms }))
    }

    /// Mean over rows of `−log softmax(row)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).shape();
        if r != c {
            return Err(Error::dim(
                "row_softmax_cross_entropy",
                format!("logits must be square, got {r}x{c}"),
            ));
        }
        self.cross_entropy(logits, targets, false)
    }

    /// As [`Tape::softmax_cross_entropy`] but entry `(i, i)` of each row is
    /// left out of the softmax entirely (the anchor is not its own
    /// candidate). Used by the doubled-batch InfoNCE baseline.
    pub fn softmax_cross_entropy_excluding_self(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var> {
        let (r, c) = self.value(logits).shape();
        if r != c {
            return Err(Error::dim(
                "row_softmax_cross_entropy",
                format!("logits must be square, got {r}x{c}"),
            ));
        }
        if let Some(i) = targets.iter().enumerate().find(|(i, t)| i == *t).map(|(i, _)| i) {
            return Err(Error::Contract(format!(
                "row {i} targets its own excluded diagonal entry"
            )));
        }
        self.cross_entropy(logits, targets, true)
    }

    fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude_diagonal: bool) -> Result<Var> {
        let m = self.value(logits);
        let (r, c) = m.shape();
        if targets.len() != r {
            return Err(Error::dim(
                "row_softmax_cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: t, len: c });
        }
        let mut probs = DenseMatrix::zeros(r, c);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let active = |j: usize| !(exclude_diagonal && j == i);
            let row = m.row(i);
            let max = (0..c)
                .filter(|&j| active(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in (0..c).filter(|&j| active(j)) {
                let e = (row[j] - max).exp();
                probs.set(i, j, e);
                denom += e;
            }
            for j in (0..c).filter(|&j| active(j)) {
                probs.set(i, j, probs.get(i, j) / denom);
            }
            total += -(row[t] - max - denom.ln());
        }
        let v = DenseMatrix::scalar(total / r as f64);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                exclude_diagonal,
                probs,
            },
        ))
    }

    /// Number of logits in each row's softmax denominator for a recorded
    /// cross-entropy node.
    pub fn ce_denominator_terms(&self, var: Var) -> Option<Vec<usize>> {
        match &self.nodes[var.0].op {
            Op::SoftmaxCrossEntropy {
                logits,
                exclude_diagonal,
                ..
            } => {
                let (r, c) = self.value(*logits).shape();
                Some(vec![if *exclude_diagonal { c - 1 } else { c }; r])
            }
            _ => None,
        }
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).frobenius_norm());
        self.push(v, Op::FrobeniusNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum of the diagonal of a square matrix.
    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if r != c {
            return Err(Error::dim("trace", format!("{r}x{c} is not square")));
        }
        let v = DenseMatrix::scalar(self.value(a).trace());
        Ok(self.push(v, Op::Trace(a)))
    }

    /// Per-row standardization with the batch (column) statistics:
    /// `(x − mean) / sqrt(var + 1e-5)`, variance with `1/n`.
    pub fn batch_standardize(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let (r, c) = m.shape();
        if c < 2 {
            return Err(Error::dim(
                "batch_standardize",
                format!("needs at least 2 columns, got {c}"),
            ));
        }
        let n = c as f64;
        let mut normalized = DenseMatrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = m.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + STANDARDIZE_EPS).sqrt();
            for (j, x) in row.iter().enumerate() {
                normalized.set(i, j, (x - mean) * s);
            }
            inv_std.push(s);
        }
        let v = normalized.clone();
        Ok(self.push(
            v,
            Op::BatchStandardize {
                input: a,
                normalized,
                inv_std,
            },
        ))
    }

    /// Identity forward, zero adjoint backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient(a))
    }

    /// The node a stop-gradient node detaches, if `v` is one.
    pub fn stop_gradient_source(&self, v: Var) -> Option<Var> {
        match self.nodes.get(v.0)?.op {
            Op::StopGradient(src) => Some(src),
            _ => None,
        }
    }

    /// `Σ + ε·I` with `ε = max(scale·trace(Σ)/D, floor)`. Returns the node
    /// and the `ε` actually applied. The trace dependence is differentiated
    /// unless the floor is active.
    pub fn regularize_spd(&mut self, sigma: Var, scale: f64, floor: f64) -> Result<(Var, f64)> {
        let m = self.value(sigma);
        let (r, c) = m.shape();
        if r != c || r == 0 {
            return Err(Error::dim("regularize_spd", format!("{r}x{c} is not square")));
        }
        let scaled = scale * m.trace() / r as f64;
        let (eps, floored) = if scaled > floor { (scaled, false) } else { (floor, true) };
        let mut v = m.clone();
        for i in 0..r {
            v.set(i, i, v.get(i, i) + eps);
        }
        Ok((
            self.push(
                v,
                Op::RegularizeSpd {
                    input: sigma,
                    scale,
                    floored,
                },
            ),
            eps,
        ))
    }

    fn factor_for(&self, sigma: Var, rhs: Var, op: &'static str) -> Result<DenseMatrix> {
        let s = self.value(sigma);
        if s.rows() != s.cols() || self.value(rhs).rows() != s.rows() {
            return Err(Error::dim(
                op,
                format!(
                    "system {:?} with right-hand side {:?}",
                    s.shape(),
                    self.value(rhs).shape()
                ),
            ));
        }
        linalg::cholesky_factor(s)
    }

    /// `X = Σ⁻¹·B` via the Cholesky factor of `Σ` (two triangular solves).
    pub fn solve_spd(&mut self, sigma: Var, rhs: Var) -> Result<Var> {
        let chol = self.factor_for(sigma, rhs, "solve_spd")?;
        let v = linalg::cholesky_solve(&chol, self.value(rhs))?;
        Ok(self.push(v, Op::SolveSpd { sigma, rhs, chol }))
    }

    /// `Y = L⁻¹·B` where `L` is the Cholesky factor of `Σ`.
    pub fn whiten_lower(&mut self, sigma: Var, rhs: Var) -> Result<Var> {
        let chol = self.factor_for(sigma, rhs, "whiten_lower")?;
        let v = linalg::solve_lower(&chol, self.value(rhs))?;
        Ok(self.push(v, Op::WhitenLower { sigma, rhs, chol }))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be a 1x1 scalar, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adjoints: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions = self.local_adjoints(node, &g)?;
            if self.corrupted == Some(node.op.kind()) {
                for (_, c) in contributions.iter_mut() {
                    *c = c.scale(1.5);
                }
            }
            adjoints[idx] = Some(g);
            for (input, c) in contributions {
                debug_assert!(input.0 < idx, "tape is not topologically ordered");
                match &mut adjoints[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            adjoints,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_adjoints(&self, node: &Node, g: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let out = match &node.op {
            Op::Leaf | Op::StopGradient(_) => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Relu(a) => {
                let x = self.value(*a);
                vec![(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
            }
            Op::AddColumn(a, col) | Op::SubColumn(a, col) => {
                let sign = if matches!(node.op, Op::AddColumn(..)) { 1.0 } else { -1.0 };
                let sums = DenseMatrix::from_fn(g.rows(), 1, |i, _| sign * g.row(i).iter().sum::<f64>());
                vec![(*a, g.clone()), (*col, sums)]
            }
            Op::RowMean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = c as f64;
                vec![(*a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0) / n))]
            }
            Op::HConcat(a, b) => {
                let ca = self.value(*a).cols();
                vec![
                    (*a, g.col_range(0, ca)),
                    (*b, g.col_range(ca, g.cols())),
                ]
            }
            Op::ColRange { input, start } => {
                let (r, c) = self.value(*input).shape();
                let (s, w) = (*start, g.cols());
                let d = DenseMatrix::from_fn(r, c, |i, j| {
                    if j >= s && j < s + w {
                        g.get(i, j - s)
                    } else {
                        0.0
                    }
                });
                vec![(*input, d)]
            }
            Op::L2NormalizeCols { input, norms } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let dots: Vec<f64> = (0..c)
                    .map(|j| (0..r).map(|i| y.get(i, j) * g.get(i, j)).sum())
                    .collect();
                let d = DenseMatrix::from_fn(r, c, |i, j| {
                    (g.get(i, j) - y.get(i, j) * dots[j]) / norms[j]
                });
                vec![(*input, d)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                exclude_diagonal,
                probs,
            } => {
                let gs = g.get(0, 0) / targets.len() as f64;
                let mut d = probs.scale(gs);
                for (i, &t) in targets.iter().enumerate() {
                    d.set(i, t, d.get(i, t) - gs);
                    if *exclude_diagonal {
                        d.set(i, i, 0.0);
                    }
                }
                vec![(*logits, d)]
            }
            Op::FrobeniusNorm(a) => {
                let norm = node.value.get(0, 0);
                let x = self.value(*a);
                let d = if norm > 0.0 {
                    x.scale(g.get(0, 0) / norm)
                } else {
                    DenseMatrix::zeros(x.rows(), x.cols())
                };
                vec![(*a, d)]
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                vec![(*a, DenseMatrix::filled(r, c, g.get(0, 0)))]
            }
            Op::Trace(a) => {
                let n = self.value(*a).rows();
                vec![(*a, DenseMatrix::identity(n).scale(g.get(0, 0)))]
            }
            Op::BatchStandardize {
                input,
                normalized,
                inv_std,
            } => {
                let (r, c) = normalized.shape();
                let n = c as f64;
                let mut d = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    let gr = g.row(i);
                    let xr = normalized.row(i);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gx_mean = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        d.set(i, j, inv_std[i] * (gr[j] - g_mean - xr[j] * gx_mean));
                    }
                }
                vec![(*input, d)]
            }
            Op::RegularizeSpd {
                input,
                scale,
                floored,
            } => {
                let mut d = g.clone();
                if !floored {
                    let n = g.rows();
                    let extra = scale * g.trace() / n as f64;
                    for i in 0..n {
                        d.set(i, i, d.get(i, i) + extra);
                    }
                }
                vec![(*input, d)]
            }
            Op::SolveSpd { sigma, rhs, chol } => {
                // X = Σ⁻¹B: ∂B = Σ⁻¹G, ∂Σ = −∂B·Xᵀ (symmetric part)
                let db = linalg::cholesky_solve(chol, g)?;
                let ds = db.matmul(&node.value.transpose())?.scale(-1.0);
                vec![(*rhs, db), (*sigma, linalg::symmetrize(&ds))]
            }
            Op::WhitenLower { sigma, rhs, chol } => {
                // Y = L⁻¹B: ∂B = L⁻ᵀG, ∂Σ = −L⁻ᵀ·Φ(G·Yᵀ)·L⁻¹ with Φ taking the
                // lower triangle and halving the diagonal.
                let db = linalg::solve_lower_transpose(chol, g)?;
                let m = g.matmul(&node.value.transpose())?;
                let n = m.rows();
                let phi = DenseMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
                    std::cmp::Ordering::Greater => m.get(i, j),
                    std::cmp::Ordering::Equal => 0.5 * m.get(i, i),
                    std::cmp::Ordering::Less => 0.0,
                });
                let ds = linalg::congruence_inverse(chol, &phi)?.scale(-1.0);
                vec![(*rhs, db), (*sigma, linalg::symmetrize(&ds))]
            }
        };
        Ok(out)
    }
}
