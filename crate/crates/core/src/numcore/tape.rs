//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and the inputs
//! needed to form its adjoint. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients, so a value used twice receives the sum of both
//! contributions.

use std::cell::Cell;
use std::sync::Arc;

use super::{DenseMatrix, ParamId, ParameterStore};
use crate::error::NumError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kinds of differentiable primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    MulColumn,
    GatherRows,
    ScatterAddRows,
    RowSum,
    Sum,
    Mean,
    Tanh,
    Gelu,
    Sigmoid,
    LogSigmoid,
    Log,
    Exp,
    RowL1Norm,
    L1Distance,
    NormalizeRows,
    RowLogSumExp,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MulColumn,
        OpKind::GatherRows,
        OpKind::ScatterAddRows,
        OpKind::RowSum,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Tanh,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::LogSigmoid,
        OpKind::Log,
        OpKind::Exp,
        OpKind::RowL1Norm,
        OpKind::L1Distance,
        OpKind::NormalizeRows,
        OpKind::RowLogSumExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MulColumn => "mul_column",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterAddRows => "scatter_add_rows",
            OpKind::RowSum => "row_sum",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::RowL1Norm => "row_l1_norm",
            OpKind::L1Distance => "l1_distance",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::RowLogSumExp => "row_logsumexp",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static ADJOINT_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test hook: corrupts the adjoint of `kind` on the current thread.
///
/// Used by self-checks to prove that the gradient harness catches a broken
/// backward rule. Pass `None` to restore correct adjoints.
pub fn inject_adjoint_fault(kind: Option<OpKind>) {
    ADJOINT_FAULT.with(|f| f.set(kind));
}

fn adjoint_fault() -> Option<OpKind> {
    ADJOINT_FAULT.with(Cell::get)
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulColumn(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    RowL1Norm(Var),
    L1Distance(Var, Var),
    NormalizeRows(Var, DenseMatrix),
    RowLogSumExp(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant | Op::Variable | Op::Param(_) => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MulColumn(..) => OpKind::MulColumn,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ScatterAddRows(..) => OpKind::ScatterAddRows,
            Op::RowSum(_) => OpKind::RowSum,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LogSigmoid(_) => OpKind::LogSigmoid,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::RowL1Norm(_) => OpKind::RowL1Norm,
            Op::L1Distance(..) => OpKind::L1Distance,
            Op::NormalizeRows(..) => OpKind::NormalizeRows,
            Op::RowLogSumExp(_) => OpKind::RowLogSumExp,
        }
    }

    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Constant | Op::Variable | Op::Param(_) => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulColumn(a, b)
            | Op::L1Distance(a, b) => [Some(a), Some(b)],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::RowL1Norm(a)
            | Op::NormalizeRows(a, _)
            | Op::RowLogSumExp(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Rows whose Euclidean norm falls below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

#[inline]
pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).gradient.add_assign(g);
            }
        }
    }
}

macro_rules! shape_check {
    ($op:expr, $cond:expr, $a:expr, $b:expr) => {
        if !$cond {
            return Err(NumError::Shape {
                op: $op,
                lhs: $a.shape(),
                rhs: $b.shape(),
            });
        }
    };
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Result<Var, NumError> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: kind.name() });
        }
        let requires_grad = match op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) => true,
            _ => op
                .inputs()
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Result<Var, NumError> {
        self.push(value, Op::Constant)
    }

    /// A free leaf that receives a gradient (not bound to a parameter).
    pub fn variable(&mut self, value: DenseMatrix) -> Result<Var, NumError> {
        self.push(value, Op::Variable)
    }

    /// A leaf holding the current value of a stored parameter.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var, NumError> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        shape_check!("add", x.shape() == y.shape(), x, y);
        let value = x.zip_map(y, |p, q| p + q);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        shape_check!("sub", x.shape() == y.shape(), x, y);
        let value = x.zip_map(y, |p, q| p - q);
        self.push(value, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        shape_check!("mul", x.shape() == y.shape(), x, y);
        let value = x.zip_map(y, |p, q| p * q);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumError> {
        self.scale(a, -1.0)
    }

    /// Multiplies row `i` of `a` by the scalar `c[i]` (`c` is `rows×1`).
    pub fn mul_column(&mut self, a: Var, c: Var) -> Result<Var, NumError> {
        let (x, col) = (self.value(a), self.value(c));
        shape_check!(
            "mul_column",
            col.cols() == 1 && col.rows() == x.rows(),
            x,
            col
        );
        let mut value = x.clone();
        for r in 0..value.rows() {
            let s = col.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(value, Op::MulColumn(a, c))
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, NumError> {
        let value = self.value(a).gather_rows(&index)?;
        self.push(value, Op::GatherRows(a, index))
    }

    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        index: Arc<[usize]>,
        rows: usize,
    ) -> Result<Var, NumError> {
        let value = self.value(a).scatter_add_rows(&index, rows)?;
        self.push(value, Op::ScatterAddRows(a, index))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push(DenseMatrix::column(&sums), Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(NumError::Argument("mean of empty matrix".into()));
        }
        let value = DenseMatrix::scalar(x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// `rows×1` column of row-wise L1 norms; subgradient 0 at 0.
    pub fn row_l1_norm(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let norms: Vec<f64> = (0..x.rows())
            .map(|r| x.row(r).iter().map(|v| v.abs()).sum())
            .collect();
        self.push(DenseMatrix::column(&norms), Op::RowL1Norm(a))
    }

    /// Pairwise L1 distances: `out[i][j] = ‖a_i − b_j‖₁`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        shape_check!("l1_distance", x.cols() == y.cols(), x, y);
        let value = DenseMatrix::from_fn(x.rows(), y.rows(), |i, j| {
            x.row(i)
                .iter()
                .zip(y.row(j))
                .map(|(p, q)| (p - q).abs())
                .sum()
        });
        self.push(value, Op::L1Distance(a, b))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = DenseMatrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.set(r, 0, n);
            if n < ZERO_NORM {
                log::warn!("normalize_rows: row {r} has zero norm; treating it as the zero vector");
                value.row_mut(r).fill(0.0);
            } else {
                value.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(value, Op::NormalizeRows(a, norms))
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let na = self.normalize_rows(a)?;
        let nb = if a == b { na } else { self.normalize_rows(b)? };
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// `rows×1` column of `log Σ_j exp(a_ij)`, stabilised by the row maximum.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let out: Vec<f64> = (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(DenseMatrix::column(&out), Op::RowLogSumExp(a))
    }

    /// Reverse pass from `output`, seeded with ones (the gradient of its sum).
    pub fn backward(&self, output: Var) -> Result<Gradients, NumError> {
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        let (r, c) = self.shape(output);
        grads[output.0] = Some(DenseMatrix::filled(r, c, 1.0));
        let fault = adjoint_fault();
        let mut params = Vec::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                params.push((idx, id));
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contribs = self.adjoint(node, &g)?;
            if fault == Some(node.op.kind()) {
                for (_, m) in &mut contribs {
                    m.scale_assign(1.25);
                }
            }
            for (var, contrib) in contribs {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn adjoint(&self, node: &Node, g: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>, NumError> {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_nt(val(*b))?),
                (*b, val(*a).matmul_tn(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |p, q| p * q)),
                (*b, g.zip_map(val(*a), |p, q| p * q)),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::MulColumn(a, c) => {
                let (x, col) = (val(*a), val(*c));
                let mut ga = g.clone();
                let mut gc = DenseMatrix::zeros(col.rows(), 1);
                for r in 0..x.rows() {
                    let s = col.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    let dot: f64 = g.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum();
                    gc.set(r, 0, dot);
                }
                vec![(*a, ga), (*c, gc)]
            }
            Op::GatherRows(a, index) => vec![(*a, g.scatter_add_rows(index, val(*a).rows())?)],
            Op::ScatterAddRows(a, index) => vec![(*a, g.gather_rows(index)?)],
            Op::RowSum(a) => {
                let x = val(*a);
                vec![(*a, DenseMatrix::from_fn(x.rows(), x.cols(), |r, _| g.get(r, 0)))]
            }
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, DenseMatrix::filled(x.rows(), x.cols(), g.item()))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                let s = g.item() / x.len() as f64;
                vec![(*a, DenseMatrix::filled(x.rows(), x.cols(), s))]
            }
            Op::Tanh(a) => vec![(*a, g.zip_map(y, |p, t| p * (1.0 - t * t)))],
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |p, x| p * gelu_grad(x)))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |p, s| p * s * (1.0 - s)))],
            Op::LogSigmoid(a) => vec![(*a, g.zip_map(val(*a), |p, x| p * sigmoid(-x)))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |p, x| p / x))],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |p, e| p * e))],
            Op::RowL1Norm(a) => {
                let x = val(*a);
                vec![(
                    *a,
                    DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, 0) * sign(x.get(r, c))),
                )]
            }
            Op::L1Distance(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let mut ga = DenseMatrix::zeros(x.rows(), x.cols());
                let mut gb = DenseMatrix::zeros(z.rows(), z.cols());
                for i in 0..x.rows() {
                    for j in 0..z.rows() {
                        let w = g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..x.cols() {
                            let s = w * sign(x.get(i, k) - z.get(j, k));
                            ga.as_mut_slice()[i * x.cols() + k] += s;
                            gb.as_mut_slice()[j * z.cols() + k] -= s;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::NormalizeRows(a, norms) => {
                let mut ga = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = norms.get(r, 0);
                    if n < ZERO_NORM {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (&yv, &gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                vec![(*a, ga)]
            }
            Op::RowLogSumExp(a) => {
                let x = val(*a);
                let ga = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                    g.get(r, 0) * (x.get(r, c) - y.get(r, 0)).exp()
                });
                vec![(*a, ga)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        // d/dx sum(x ⊙ x + x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.variable(m(&[&[1.0, -2.0], &[0.5, 3.0]])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &m(&[&[3.0, -3.0], &[2.0, 7.0]]));
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(m(&[&[0.0, -1.5, 2.0]])).unwrap();
        let n = tape.row_l1_norm(x).unwrap();
        assert_eq!(tape.value(n).item(), 3.5);
        let g = tape.backward(n).unwrap();
        assert_eq!(g.get(x).unwrap(), &m(&[&[0.0, -1.0, 1.0]]));
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.variable(m(&[&[1000.0, 1000.0], &[-1000.0, 0.0]])).unwrap();
        let l = tape.row_logsumexp(x).unwrap();
        let v = tape.value(l);
        assert!((v.get(0, 0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(v.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let x = tape.variable(m(&[&[0.0, 1.0]])).unwrap();
        assert!(matches!(tape.log(x), Err(NumError::NonFinite { op: "log" })));
        assert!(tape.constant(m(&[&[f64::NAN]])).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.variable(DenseMatrix::zeros(2, 3)).unwrap();
        let b = tape.variable(DenseMatrix::zeros(3, 2)).unwrap();
        assert!(matches!(tape.add(a, b), Err(NumError::Shape { .. })));
        assert!(tape.matmul(a, b).is_ok());
    }

    #[test]
    fn gelu_uses_exact_cdf() {
        // x Φ(x) at x = 1 is 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert_eq!(gelu(0.0), 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn op_names_round_trip() {
        for kind in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
        assert_eq!(OpKind::from_name("warp"), None);
    }

    #[test]
    fn injected_fault_only_affects_named_op() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.variable(m(&[&[0.3, -0.7]])).unwrap();
            let t = tape.tanh(x).unwrap();
            let s = tape.sum(t).unwrap();
            tape.backward(s).unwrap().get(x).unwrap().clone()
        };
        let clean = run();
        inject_adjoint_fault(Some(OpKind::Gelu));
        let other = run();
        inject_adjoint_fault(Some(OpKind::Tanh));
        let broken = run();
        inject_adjoint_fault(None);
        assert_eq!(clean, other);
        assert!(clean.max_abs_diff(&broken) > 1e-3);
    }
}
