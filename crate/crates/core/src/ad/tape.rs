//! Reverse-mode differentiation over dense matrix-valued nodes.
//!
//! Every node holds a `DMatrix<f64>`; column vectors are `n x 1` and scalars
//! are `1 x 1`. Elementwise binary ops broadcast a `1 x 1` operand.
//! Gradients come back as [`GradMatrix`] values whose rows index the
//! (column-major) entries of the output and whose columns index the entries
//! of the input, so chained stages compose by plain matrix multiplication.

use nalgebra::DMatrix;

use super::chol::{cholesky_lower, chol_grad};
use crate::error::{Error, Result};

/// Jacobian block: rows are output entries, columns are input entries.
pub type GradMatrix = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Powi(usize, i32),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Floor(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Entry(usize, usize, usize),
    Stack(Vec<usize>),
    Cholesky(usize),
    Solve(usize, usize),
    StopGrad(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Input | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | Solve(a, b) => {
                vec![*a, *b]
            }
            Neg(a) | Scale(a, _) | Powi(a, _) | Exp(a) | Log(a) | Sin(a) | Cos(a) | Sqrt(a)
            | Floor(a) | Transpose(a) | Sum(a) | Entry(a, _, _) | Cholesky(a) | StopGrad(a) => {
                vec![*a]
            }
            Stack(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one Jacobian per ancestor of the output.
#[derive(Debug, Clone)]
pub struct Gradients {
    output: usize,
    jac: Vec<Option<GradMatrix>>,
}

impl Gradients {
    /// `d vec(output) / d vec(node)`, or `None` when `node` does not feed the output.
    pub fn wrt(&self, node: NodeId) -> Option<&GradMatrix> {
        self.jac.get(node.0).and_then(|j| j.as_ref())
    }

    /// Like [`wrt`](Self::wrt) but returns a zero block for unrelated nodes.
    pub fn wrt_or_zero(&self, tape: &Tape, node: NodeId) -> GradMatrix {
        match self.wrt(node) {
            Some(j) => j.clone(),
            None => DMatrix::zeros(tape.len_of(NodeId(self.output)), tape.len_of(node)),
        }
    }

    /// Ancestors of the output, in tape order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.jac
            .iter()
            .enumerate()
            .filter(|(_, j)| j.is_some())
            .map(|(i, _)| NodeId(i))
    }
}

fn same_or_scalar(op: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb && sa != (1, 1) && sb != (1, 1) {
        panic!(
            "{}",
            Error::Shape {
                op,
                lhs: sa,
                rhs: sb
            }
        );
    }
}

fn zip(a: &DMatrix<f64>, b: &DMatrix<f64>, f: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
    match (a.shape(), b.shape()) {
        (sa, sb) if sa == sb => a.zip_map(b, f),
        ((1, 1), _) => b.map(|y| f(a[0], y)),
        (_, (1, 1)) => a.map(|x| f(x, b[0])),
        _ => unreachable!("shape checked by caller"),
    }
}

/// Reduce an adjoint back to the operand's shape after broadcasting.
fn unbroadcast(adj: DMatrix<f64>, shape: (usize, usize)) -> DMatrix<f64> {
    if adj.shape() == shape {
        adj
    } else {
        DMatrix::from_element(1, 1, adj.sum())
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

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn v(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        self.v(id)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.v(id);
        assert_eq!(v.len(), 1, "node {} is not scalar", id.0);
        v[0]
    }

    /// Number of entries in a node's value.
    pub fn len_of(&self, id: NodeId) -> usize {
        self.v(id).len()
    }

    pub fn input(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn input_vector(&mut self, xs: &[f64]) -> NodeId {
        self.input(DMatrix::from_column_slice(xs.len(), 1, xs))
    }

    pub fn input_scalar(&mut self, x: f64) -> NodeId {
        self.input(DMatrix::from_element(1, 1, x))
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.constant(DMatrix::from_element(1, 1, x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_or_scalar("add", self.v(a), self.v(b));
        let v = zip(self.v(a), self.v(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_or_scalar("sub", self.v(a), self.v(b));
        let v = zip(self.v(a), self.v(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_or_scalar("mul", self.v(a), self.v(b));
        let v = zip(self.v(a), self.v(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_or_scalar("div", self.v(a), self.v(b));
        let v = zip(self.v(a), self.v(b), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.v(a);
        self.push(v, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.v(a) * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        let v = self.v(a).map(|x| x.powi(n));
        self.push(v, Op::Powi(a.0, n))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).map(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).map(f64::sin);
        self.push(v, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).map(f64::cos);
        self.push(v, Op::Cos(a.0))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a.0))
    }

    /// Piecewise constant; its derivative is taken as zero everywhere.
    pub fn floor(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).map(f64::floor);
        self.push(v, Op::Floor(a.0))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.v(a), self.v(b));
        if va.ncols() != vb.nrows() {
            panic!(
                "{}",
                Error::Shape {
                    op: "matmul",
                    lhs: va.shape(),
                    rhs: vb.shape()
                }
            );
        }
        let v = va * vb;
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.v(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    /// `x^T y` for two column vectors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let at = self.transpose(a);
        self.matmul(at, b)
    }

    /// Scalar entry `(row, col)` of a node.
    pub fn entry(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.v(a)[(row, col)]);
        self.push(v, Op::Entry(a.0, row, col))
    }

    /// Vertical concatenation of nodes with equal column counts.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack of zero nodes");
        let ncols = self.v(parts[0]).ncols();
        let nrows: usize = parts.iter().map(|p| self.v(*p).nrows()).sum();
        let mut v = DMatrix::zeros(nrows, ncols);
        let mut r = 0;
        for p in parts {
            let pv = self.v(*p);
            if pv.ncols() != ncols {
                panic!(
                    "{}",
                    Error::Shape {
                        op: "stack",
                        lhs: (nrows, ncols),
                        rhs: pv.shape()
                    }
                );
            }
            v.rows_mut(r, pv.nrows()).copy_from(pv);
            r += pv.nrows();
        }
        self.push(v, Op::Stack(parts.iter().map(|p| p.0).collect()))
    }

    /// Lower Cholesky factor. Only the lower triangle of the input is read.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let l = cholesky_lower(self.v(a))?;
        Ok(self.push(l, Op::Cholesky(a.0)))
    }

    /// `X = A^{-1} B` for square `A`.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.v(a), self.v(b));
        if !va.is_square() || va.nrows() != vb.nrows() {
            return Err(Error::Shape {
                op: "solve",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let x = va.clone().lu().solve(vb).ok_or(Error::Singular)?;
        Ok(self.push(x, Op::Solve(a.0, b.0)))
    }

    /// Passes the value through and blocks gradients. Marks samples that
    /// were not drawn by a differentiable transform.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.v(a).clone();
        self.push(v, Op::StopGrad(a.0))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(id.0));
        }
        for (n, node) in self.nodes.iter().enumerate().take(id.0 + 1) {
            if let Some(&bad) = node.op.inputs().iter().find(|&&i| i >= n) {
                return Err(Error::MalformedTape { node: n, input: bad });
            }
        }
        Ok(())
    }

    /// Nodes that lie on some path into `output`.
    fn ancestors(&self, output: usize) -> Vec<bool> {
        let mut reach = vec![false; output + 1];
        reach[output] = true;
        for n in (0..=output).rev() {
            if reach[n] {
                for i in self.nodes[n].op.inputs() {
                    reach[i] = true;
                }
            }
        }
        reach
    }

    /// True if some path from `from` to `to` passes through a
    /// [`stop_gradient`](Self::stop_gradient) node.
    pub fn path_crosses_stop(&self, from: NodeId, to: NodeId) -> bool {
        if to.0 >= self.nodes.len() || from.0 > to.0 {
            return false;
        }
        let into_to = self.ancestors(to.0);
        let mut from_reach = vec![false; to.0 + 1];
        from_reach[from.0] = true;
        for n in from.0 + 1..=to.0 {
            from_reach[n] = self.nodes[n].op.inputs().iter().any(|&i| from_reach[i]);
            if from_reach[n] && into_to[n] && matches!(self.nodes[n].op, Op::StopGrad(_)) {
                return true;
            }
        }
        false
    }

    /// One reverse sweep seeded with `seed` at `output`.
    fn sweep(&self, output: usize, seed: DMatrix<f64>, reach: &[bool]) -> Vec<Option<DMatrix<f64>>> {
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; output + 1];
        adj[output] = Some(seed);
        for n in (0..=output).rev() {
            let Some(g) = adj[n].clone() else { continue };
            let node = &self.nodes[n];
            let mut acc = |i: usize, d: DMatrix<f64>| {
                if !reach[i] {
                    return;
                }
                match &mut adj[i] {
                    Some(existing) => *existing += d,
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |i: usize| &self.nodes[i].value;
            use Op::*;
            match &node.op {
                Input | Const | Floor(_) | StopGrad(_) => {}
                Add(a, b) => {
                    acc(*a, unbroadcast(g.clone(), val(*a).shape()));
                    acc(*b, unbroadcast(g.clone(), val(*b).shape()));
                }
                Sub(a, b) => {
                    acc(*a, unbroadcast(g.clone(), val(*a).shape()));
                    acc(*b, unbroadcast(-g.clone(), val(*b).shape()));
                }
                Mul(a, b) => {
                    let da = zip(&g, val(*b), |x, y| x * y);
                    let db = zip(&g, val(*a), |x, y| x * y);
                    acc(*a, unbroadcast(da, val(*a).shape()));
                    acc(*b, unbroadcast(db, val(*b).shape()));
                }
                Div(a, b) => {
                    let da = zip(&g, val(*b), |x, y| x / y);
                    let q = zip(val(*a), val(*b), |x, y| -x / (y * y));
                    let db = zip(&g, &q, |x, y| x * y);
                    acc(*a, unbroadcast(da, val(*a).shape()));
                    acc(*b, unbroadcast(db, val(*b).shape()));
                }
                Neg(a) => acc(*a, -g.clone()),
                Scale(a, c) => acc(*a, &g * *c),
                Powi(a, k) => {
                    let d = val(*a).map(|x| *k as f64 * x.powi(k - 1));
                    acc(*a, g.component_mul(&d));
                }
                Exp(a) => acc(*a, g.component_mul(&node.value)),
                Log(a) => acc(*a, g.component_div(val(*a))),
                Sin(a) => acc(*a, g.component_mul(&val(*a).map(f64::cos))),
                Cos(a) => acc(*a, g.component_mul(&val(*a).map(|x| -x.sin()))),
                Sqrt(a) => acc(*a, g.component_div(&node.value.map(|y| 2.0 * y))),
                MatMul(a, b) => {
                    acc(*a, &g * val(*b).transpose());
                    acc(*b, val(*a).transpose() * &g);
                }
                Transpose(a) => acc(*a, g.transpose()),
                Sum(a) => {
                    let s = val(*a);
                    acc(*a, DMatrix::from_element(s.nrows(), s.ncols(), g[0]));
                }
                Entry(a, r, c) => {
                    let s = val(*a);
                    let mut d = DMatrix::zeros(s.nrows(), s.ncols());
                    d[(*r, *c)] = g[0];
                    acc(*a, d);
                }
                Stack(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let rows = val(*p).nrows();
                        acc(*p, g.rows(r, rows).into_owned());
                        r += rows;
                    }
                }
                Cholesky(a) => {
                    // Strictly-upper adjoint entries multiply structural zeros.
                    let lbar = g.lower_triangle();
                    let sbar = chol_grad(val(*a), &lbar)
                        .expect("forward pass already factorized this matrix");
                    acc(*a, sbar);
                }
                Solve(a, b) => {
                    let at = val(*a).transpose();
                    let bbar = at.lu().solve(&g).expect("forward pass already solved");
                    let abar = -&bbar * node.value.transpose();
                    acc(*a, abar);
                    acc(*b, bbar);
                }
            }
        }
        adj
    }

    /// Adjoint of a scalar output with respect to every ancestor, shaped like
    /// the ancestor's value.
    pub fn grad(&self, output: NodeId) -> Result<Vec<Option<DMatrix<f64>>>> {
        self.check(output)?;
        if self.len_of(output) != 1 {
            return Err(Error::Shape {
                op: "grad",
                lhs: self.v(output).shape(),
                rhs: (1, 1),
            });
        }
        let reach = self.ancestors(output.0);
        let seed = DMatrix::from_element(1, 1, 1.0);
        Ok(self.sweep(output.0, seed, &reach))
    }

    /// Full reverse pass: `d vec(output) / d vec(node)` for every ancestor.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        let out_shape = self.v(output).shape();
        let m = out_shape.0 * out_shape.1;
        let reach = self.ancestors(output.0);
        let mut jac: Vec<Option<GradMatrix>> = vec![None; self.nodes.len()];
        for (i, r) in reach.iter().enumerate() {
            if *r {
                jac[i] = Some(DMatrix::zeros(m, self.nodes[i].value.len()));
            }
        }
        for k in 0..m {
            let mut seed = DMatrix::zeros(out_shape.0, out_shape.1);
            seed[k] = 1.0;
            let adj = self.sweep(output.0, seed, &reach);
            for (i, a) in adj.into_iter().enumerate() {
                if let (Some(a), Some(j)) = (a, jac[i].as_mut()) {
                    for (c, v) in a.iter().enumerate() {
                        j[(k, c)] = *v;
                    }
                }
            }
        }
        Ok(Gradients {
            output: output.0,
            jac,
        })
    }

    /// Convenience: Jacobian of `output` with respect to `input` (zeros when unrelated).
    pub fn jacobian(&self, output: NodeId, input: NodeId) -> Result<GradMatrix> {
        let g = self.backward(output)?;
        if input.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(input.0));
        }
        Ok(g.wrt_or_zero(self, input))
    }
}
