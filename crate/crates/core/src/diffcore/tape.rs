use std::collections::HashMap;

use super::matrix::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Log,
    Exp,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    BlockScores(Var, Var, usize),
    BlockApply(Var, Var, usize),
    BlockMean(Var, usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Wengert list for reverse-mode differentiation over dense matrices.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// outputs and [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_row_in_place(row: &mut [f64]) {
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

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Log => "log",
            Unary::Exp => "exp",
        }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from `{name}`")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input (receives a gradient but is not a parameter).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the current value of a parameter. Repeated calls for the same
    /// parameter on one tape return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        matmul_into(va, vb, &mut out);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::dim("matmul_nt", format!("{:?} x {:?}^T", va.shape(), vb.shape())));
        }
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        matmul_nt_into(va, vb, &mut out);
        self.push(out, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Elementwise quotient; every divisor must be nonzero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::NumericDomain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = self.zip_same(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b), "div")
    }

    /// `a + 1·b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        if op == Unary::Log && self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: "log of a nonpositive entry".into(),
            });
        }
        let out = self.value(a).map(|x| op.apply(x));
        self.push(out, Op::Unary(a, op), op.name())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_row_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum")
    }

    /// Column means as a single row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let mut out = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            out.add_assign(&Matrix::row_vector(va.row(r)));
        }
        let n = va.rows() as f64;
        let out = out.map(|x| x / n);
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {} columns", va.cols())));
        }
        let mut out = Matrix::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {}", va.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * va.cols());
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let out = Matrix::from_vec(idx.len(), va.cols(), data)?;
        self.push(out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Tiles a single row `count` times.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != 1 {
            return Err(Error::dim("repeat_rows", format!("expected one row, got {:?}", va.shape())));
        }
        let out = Matrix::from_vec(count, va.cols(), va.data().repeat(count))?;
        self.push(out, Op::RepeatRows(a), "repeat_rows")
    }

    fn check_blocks(&self, op: &'static str, a: Var, block: usize) -> Result<usize> {
        let rows = self.value(a).rows();
        if block == 0 || !rows.is_multiple_of(block) {
            return Err(Error::dim(op, format!("{rows} rows are not a multiple of block {block}")));
        }
        Ok(rows / block)
    }

    /// Per-block `q k^T`: rows are grouped into consecutive blocks of
    /// `block` rows and each block only sees keys from its own block.
    /// Output is `(blocks*block) x block`.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        let nb = self.check_blocks("block_scores", q, block)?;
        let (vq, vk) = (self.value(q), self.value(k));
        if vq.shape() != vk.shape() {
            return Err(Error::dim("block_scores", format!("{:?} vs {:?}", vq.shape(), vk.shape())));
        }
        let mut out = Matrix::zeros(nb * block, block);
        for b in 0..nb {
            for i in 0..block {
                let qi = vq.row(b * block + i);
                for j in 0..block {
                    let kj = vk.row(b * block + j);
                    let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                    out.set(b * block + i, j, dot);
                }
            }
        }
        self.push(out, Op::BlockScores(q, k, block), "block_scores")
    }

    /// Per-block `p v` where `p` is `(blocks*block) x block` and `v` is
    /// `(blocks*block) x d`.
    pub fn block_apply(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let nb = self.check_blocks("block_apply", p, block)?;
        let (vp, vv) = (self.value(p), self.value(v));
        if vp.cols() != block || vv.rows() != vp.rows() {
            return Err(Error::dim("block_apply", format!("{:?} x {:?}", vp.shape(), vv.shape())));
        }
        let d = vv.cols();
        let mut out = Matrix::zeros(vp.rows(), d);
        for b in 0..nb {
            for i in 0..block {
                let r = b * block + i;
                let prow = vp.row(r).to_vec();
                let orow = out.row_mut(r);
                for (j, &pij) in prow.iter().enumerate() {
                    for (o, &x) in orow.iter_mut().zip(vv.row(b * block + j)) {
                        *o += pij * x;
                    }
                }
            }
        }
        self.push(out, Op::BlockApply(p, v, block), "block_apply")
    }

    /// Mean over each consecutive block of `block` rows.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let nb = self.check_blocks("block_mean", a, block)?;
        let va = self.value(a);
        let mut out = Matrix::zeros(nb, va.cols());
        for b in 0..nb {
            for i in 0..block {
                for (o, &x) in out.row_mut(b).iter_mut().zip(va.row(b * block + i)) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / block as f64;
        let out = out.map(|x| x * inv);
        self.push(out, Op::BlockMean(a, block), "block_mean")
    }

    /// Reverse sweep from a scalar output. Parameter adjoints are added to
    /// `store`; all per-node adjoints are returned.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>], store: &mut ParamStore) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                matmul_nt_into(g, vb, &mut ga);
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                matmul_tn_into(va, g, &mut gb);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                matmul_into(g, vb, &mut ga);
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                matmul_tn_into(g, va, &mut gb);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(grads, *a, zip(g, vb, |x, y| x * y));
                acc(grads, *b, zip(g, va, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(grads, *a, zip(g, vb, |x, y| x / y));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vb.data())
                    .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                    .collect();
                acc(grads, *b, Matrix::from_vec(g.rows(), g.cols(), gb).expect("shape"));
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Unary(a, op) => {
                let x = val(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((gi, &xi), &yi)| gi * op.derivative(xi, yi))
                    .collect();
                acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = x * inv;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut gp = Matrix::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    off += c;
                    acc(grads, p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let gp = Matrix::from_vec(r, c, g.data()[row * c..(row + r) * c].to_vec())
                        .expect("shape");
                    row += r;
                    acc(grads, p, gp);
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::RepeatRows(a) => {
                let mut ga = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in ga.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::BlockScores(q, k, block) => {
                let (vq, vk) = (val(*q), val(*k));
                let block = *block;
                let d = vq.cols();
                let mut gq = Matrix::zeros(vq.rows(), d);
                let mut gk = Matrix::zeros(vk.rows(), d);
                for b in 0..vq.rows() / block {
                    for i in 0..block {
                        let r = b * block + i;
                        for j in 0..block {
                            let s = b * block + j;
                            let gij = g.get(r, j);
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                gq.data_mut()[r * d + t] += gij * vk.get(s, t);
                                gk.data_mut()[s * d + t] += gij * vq.get(r, t);
                            }
                        }
                    }
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
            }
            Op::BlockApply(p, v, block) => {
                let (vp, vv) = (val(*p), val(*v));
                let block = *block;
                let d = vv.cols();
                let mut gp = Matrix::zeros(vp.rows(), block);
                let mut gv = Matrix::zeros(vv.rows(), d);
                for b in 0..vp.rows() / block {
                    for i in 0..block {
                        let r = b * block + i;
                        let grow = g.row(r);
                        for j in 0..block {
                            let s = b * block + j;
                            let vrow = vv.row(s);
                            let dot: f64 = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                            gp.set(r, j, dot);
                            let pij = vp.get(r, j);
                            for (o, &x) in gv.row_mut(s).iter_mut().zip(grow) {
                                *o += pij * x;
                            }
                        }
                    }
                }
                acc(grads, *p, gp);
                acc(grads, *v, gv);
            }
            Op::BlockMean(a, block) => {
                let (r, c) = val(*a).shape();
                let inv = 1.0 / *block as f64;
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(i / block)) {
                        *o = x * inv;
                    }
                }
                acc(grads, *a, ga);
            }
        }
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
