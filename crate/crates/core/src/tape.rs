//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in evaluation order and addressed by
//! [`Var`] handles. [`Tape::backward`] replays the record once in reverse;
//! afterwards the tape refuses new operations and a second backward pass.
//!
//! Stop-gradient comes in two forms: [`Tape::constant`] for literal inputs and
//! [`Tape::detach`] for a computed value that must act as a constant.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Differentiable primitives, used to name fault-injection targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    AddRowBias,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Square,
    Relu,
    MaxWithConstant,
    RowLogSumExp,
    RowCosine,
    RowSum,
    Sum,
    GatherRows,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::MatMul,
        Primitive::AddRowBias,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::Square,
        Primitive::Relu,
        Primitive::MaxWithConstant,
        Primitive::RowLogSumExp,
        Primitive::RowCosine,
        Primitive::RowSum,
        Primitive::Sum,
        Primitive::GatherRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::AddRowBias => "add_row_bias",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::Square => "square",
            Primitive::Relu => "relu",
            Primitive::MaxWithConstant => "max_with_constant",
            Primitive::RowLogSumExp => "row_log_sum_exp",
            Primitive::RowCosine => "row_cosine",
            Primitive::RowSum => "row_sum",
            Primitive::Sum => "sum",
            Primitive::GatherRows => "gather_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Relu(usize),
    MaxWithConstant(usize, f64),
    RowLogSumExp(usize),
    RowCosine(usize, usize),
    RowSum(usize),
    Sum(usize),
    GatherRows(usize, Vec<usize>),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf | Op::Constant => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::AddRowBias(..) => Primitive::AddRowBias,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::Square(..) => Primitive::Square,
            Op::Relu(..) => Primitive::Relu,
            Op::MaxWithConstant(..) => Primitive::MaxWithConstant,
            Op::RowLogSumExp(..) => Primitive::RowLogSumExp,
            Op::RowCosine(..) => Primitive::RowCosine,
            Op::RowSum(..) => Primitive::RowSum,
            Op::Sum(..) => Primitive::Sum,
            Op::GatherRows(..) => Primitive::GatherRows,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some adjoint path reaches a grad-requiring leaf.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<(Primitive, f64)>,
}

/// Adjoints of every grad-requiring leaf after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `d root / d leaf`, or `None` if `var` is not a grad-requiring leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but takes ownership.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the adjoints produced by `primitive` by `factor`.
    /// Exists only to prove the gradient checker catches broken backward rules.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, primitive: Primitive, factor: f64) {
        self.fault = Some((primitive, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients can flow out of `v` into some leaf.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that receives an adjoint in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `v`'s value that blocks every adjoint path through it.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a.0, b.0), t)
    }

    /// `a` (`m x n`) plus the `1 x n` row `bias` on every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_bias(self.value(bias))?;
        let t = self.tracked(a) || self.tracked(bias);
        self.push(value, Op::AddRowBias(a.0, bias.0), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a.0, b.0), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a.0, b.0), t)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a.0, factor), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let t = self.tracked(a);
        self.push(value, Op::AddScalar(a.0), t)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        let t = self.tracked(a);
        self.push(value, Op::Square(a.0), t)
    }

    /// `max(x, 0)`; the adjoint at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).relu();
        let t = self.tracked(a);
        self.push(value, Op::Relu(a.0), t)
    }

    /// `max(x, c)`; the adjoint at exactly `c` is 0.
    pub fn max_with_constant(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| if x > c { x } else { c });
        let t = self.tracked(a);
        self.push(value, Op::MaxWithConstant(a.0, c), t)
    }

    /// Max-shifted `log sum_j exp(a_ij)` per row, as an `m x 1` column.
    pub fn row_log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.cols() == 0 {
            return Err(Error::shape("row_log_sum_exp", src.shape(), (src.rows(), 1)));
        }
        let value = Tensor::column(src.row_iter().map(crate::tensor::log_sum_exp).collect());
        let t = self.tracked(a);
        self.push(value, Op::RowLogSumExp(a.0), t)
    }

    /// Per-row cosine similarity, as an `m x 1` column. Zero-norm rows are rejected.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("row_cosine", va.shape(), vb.shape()));
        }
        let mut out = Vec::with_capacity(va.rows());
        for (i, (ra, rb)) in va.row_iter().zip(vb.row_iter()).enumerate() {
            let (dot, na, nb) = dot_norms(ra, rb);
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate(format!("row_cosine: zero-norm row {i}")));
            }
            out.push(dot / (na * nb));
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(Tensor::column(out), Op::RowCosine(a.0, b.0), t)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::column(self.value(a).row_iter().map(|r| r.iter().sum()).collect());
        let t = self.tracked(a);
        self.push(value, Op::RowSum(a.0), t)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(value, Op::Sum(a.0), t)
    }

    /// Mean of all entries; an empty tensor has mean 0.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        if n == 0 {
            return Ok(s);
        }
        self.scale(s, 1.0 / n as f64)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let value = self.value(a).select_rows(&indices)?;
        let t = self.tracked(a);
        self.push(value, Op::GatherRows(a.0, indices), t)
    }

    /// Replays the tape in reverse from the scalar `root`.
    ///
    /// Consumes the tape: any later operation or second backward fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                adj[idx] = Some(g);
                continue;
            }
            let contributions = self.local_adjoints(idx, &g);
            let factor = match (self.fault, self.nodes[idx].op.primitive()) {
                (Some((p, f)), Some(q)) if p == q => f,
                _ => 1.0,
            };
            for (input, mut contrib) in contributions {
                if !self.nodes[input].tracked {
                    continue;
                }
                if factor != 1.0 {
                    contrib = contrib.map(|v| v * factor);
                }
                accumulate(&mut adj[input], contrib);
            }
        }

        let leaves = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(node, a)| match node.op {
                Op::Leaf => Some(a.unwrap_or_else(|| {
                    let (r, c) = node.value.shape();
                    Tensor::zeros(r, c)
                })),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    /// Adjoint contributions of node `idx` to its inputs, given its own adjoint `g`.
    fn local_adjoints(&self, idx: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let want = |i: usize| self.nodes[i].tracked;
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            &Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if want(a) {
                    // dA = G * B^T
                    let (m, k) = val(a).shape();
                    let mut da = Tensor::zeros(m, k);
                    gemm(g, false, val(b), true, &mut da, 0.0);
                    out.push((a, da));
                }
                if want(b) {
                    // dB = A^T * G
                    let (k, n) = val(b).shape();
                    let mut db = Tensor::zeros(k, n);
                    gemm(val(a), true, g, false, &mut db, 0.0);
                    out.push((b, db));
                }
                out
            }
            &Op::AddRowBias(a, bias) => {
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for row in g.row_iter() {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(a, g.clone()), (bias, Tensor::row_vector(db))]
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            &Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if want(a) {
                    out.push((a, mul_same(g, val(b))));
                }
                if want(b) {
                    out.push((b, mul_same(g, val(a))));
                }
                out
            }
            &Op::Scale(a, f) => vec![(a, g.map(|v| v * f))],
            &Op::AddScalar(a) => vec![(a, g.clone())],
            &Op::Square(a) => {
                let x = val(a);
                let d = g.zip_map(x, "square'", |gv, xv| 2.0 * xv * gv).expect("shapes agree");
                vec![(a, d)]
            }
            &Op::Relu(a) => {
                let x = val(a);
                let d = g
                    .zip_map(x, "relu'", |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("shapes agree");
                vec![(a, d)]
            }
            &Op::MaxWithConstant(a, c) => {
                let x = val(a);
                let d = g
                    .zip_map(x, "max'", |gv, xv| if xv > c { gv } else { 0.0 })
                    .expect("shapes agree");
                vec![(a, d)]
            }
            &Op::RowLogSumExp(a) => {
                let x = val(a);
                let lse = &node.value;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (gr, l) = (g.get(r, 0), lse.get(r, 0));
                    for c in 0..x.cols() {
                        d.set(r, c, gr * (x.get(r, c) - l).exp());
                    }
                }
                vec![(a, d)]
            }
            &Op::RowCosine(a, b) => {
                let (xa, xb) = (val(a), val(b));
                let (rows, cols) = xa.shape();
                let mut da = Tensor::zeros(rows, cols);
                let mut db = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let (ra, rb) = (xa.row(r), xb.row(r));
                    let (dot, na, nb) = dot_norms(ra, rb);
                    let cos = dot / (na * nb);
                    let gr = g.get(r, 0);
                    for c in 0..cols {
                        da.set(r, c, gr * (rb[c] / (na * nb) - cos * ra[c] / (na * na)));
                        db.set(r, c, gr * (ra[c] / (na * nb) - cos * rb[c] / (nb * nb)));
                    }
                }
                let mut out = Vec::with_capacity(2);
                if want(a) {
                    out.push((a, da));
                }
                if want(b) {
                    out.push((b, db));
                }
                out
            }
            &Op::RowSum(a) => {
                let (rows, cols) = val(a).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    for c in 0..cols {
                        d.set(r, c, gr);
                    }
                }
                vec![(a, d)]
            }
            &Op::Sum(a) => {
                let (rows, cols) = val(a).shape();
                vec![(a, Tensor::filled(rows, cols, g.get(0, 0)))]
            }
            Op::GatherRows(a, indices) => {
                let a = *a;
                let (rows, cols) = val(a).shape();
                let mut d = Tensor::zeros(rows, cols);
                for (out_row, &src) in indices.iter().enumerate() {
                    for c in 0..cols {
                        let v = d.get(src, c) + g.get(out_row, c);
                        d.set(src, c, v);
                    }
                }
                vec![(a, d)]
            }
        }
    }
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn mul_same(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, "mul'", |x, y| x * y).expect("shapes agree")
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_equal_to_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.param(Tensor::scalar(5.0)).unwrap();
        let root = tape.square(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
        assert_eq!(g.get(y).unwrap().data(), &[10.0]);
    }

    #[test]
    fn square_adjoint_at_two_is_four() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let sq = tape.square(x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn relu_and_max_with_constant_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(Tensor::row_vector(vec![-1.0, 3.0])).unwrap();
        let m = tape.max_with_constant(y, 0.0).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 1)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        // a failed precondition does not consume the tape
        assert!(!tape.is_consumed());
    }

    #[test]
    fn tape_is_replay_once() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert!(matches!(tape.square(x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // root = x*x + x  -> d/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let root = tape.add(sq, x).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.square(x).unwrap();
        let yc = tape.detach(y).unwrap();
        assert!(!tape.requires_grad(yc));
        let root = tape.mul(yc, x).unwrap();
        let g = tape.backward(root).unwrap();
        // only the direct path: d(c * x)/dx = c = 4
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn row_log_sum_exp_values() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[vec![0.0; 10]]).unwrap())
            .unwrap();
        let l = tape.row_log_sum_exp(a).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-15);

        let b = tape.constant(Tensor::from_rows(&[[-7.5]]).unwrap()).unwrap();
        let l = tape.row_log_sum_exp(b).unwrap();
        assert_eq!(tape.value(l).data(), &[-7.5]);
    }

    #[test]
    fn row_cosine_values_and_zero_norm() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]]).unwrap())
            .unwrap();
        let c = tape.row_cosine(a, a).unwrap();
        for v in tape.value(c).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let p = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let q = tape.constant(Tensor::from_rows(&[[0.0, 2.0]]).unwrap()).unwrap();
        let c = tape.row_cosine(p, q).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);

        let z = tape.constant(Tensor::zeros(1, 2)).unwrap();
        assert!(matches!(tape.row_cosine(p, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut tape = Tape::new();
        let a = tape
            .param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap())
            .unwrap();
        let g = tape.gather_rows(a, vec![1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(g).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn primitive_names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(Primitive::from_name(p.name()), Some(p));
        }
    }
}
