//! Matrix-valued reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it and
//! a single reverse sweep visits each node once.

use super::matrix::gemm;
use super::{eigen, LinalgError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    Rows { src: Var, start: usize },
    SumSquares(Var),
    StabilityHinge { src: Var, grad: Matrix },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Matrix {
        self.adj
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
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

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> LinalgError {
        LinalgError::DimensionMismatch { op, left: self.shape(a), right: self.shape(b) }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, LinalgError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, LinalgError> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulT(a, b), value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, LinalgError> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, LinalgError> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    /// Adds the `1 × cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, LinalgError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(self.mismatch("add_row", a, bias));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..ar {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a, bias), value, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), value, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, LinalgError> {
        let value = self.value(a).hcat(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), value, ng))
    }

    /// Rows `start..start+len` of `src`.
    pub fn rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, LinalgError> {
        let (r, c) = self.shape(src);
        if start + len > r {
            return Err(LinalgError::DimensionMismatch { op: "rows", left: (r, c), right: (start + len, c) });
        }
        let value = self.value(src).row_block(start, len);
        let ng = self.needs(src);
        Ok(self.push(Op::Rows { src, start }, value, ng))
    }

    /// `Σ a_ij²` as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::from_raw(1, 1, vec![self.value(a).sum_squares()]);
        let ng = self.needs(a);
        self.push(Op::SumSquares(a), value, ng)
    }

    /// `Σ_λ max(0, |λ| − 1)` over the eigenvalues of the square matrix `a`.
    pub fn stability_hinge(&mut self, a: Var) -> Result<Var, LinalgError> {
        let ng = self.needs(a);
        let (value, grad) = eigen::stability_hinge(self.value(a), ng)?;
        let grad = grad.unwrap_or_else(|| Matrix::zeros(0, 0));
        Ok(self.push(Op::StabilityHinge { src: a, grad }, Matrix::from_raw(1, 1, vec![value]), ng))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, LinalgError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(LinalgError::NonScalarLoss { shape });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let (before, _) = adj.split_at_mut(i);
            self.propagate(&node.op, &node.value, &g, before);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // C = A B: dA += G Bᵀ, dB += Aᵀ G
                if let Some(da) = slot(nodes, adj, a) {
                    gemm(1.0, g, false, &nodes[b.0].value, true, 1.0, da);
                }
                if let Some(db) = slot(nodes, adj, b) {
                    gemm(1.0, &nodes[a.0].value, true, g, false, 1.0, db);
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA += G B, dB += Gᵀ A
                if let Some(da) = slot(nodes, adj, a) {
                    gemm(1.0, g, false, &nodes[b.0].value, false, 1.0, da);
                }
                if let Some(db) = slot(nodes, adj, b) {
                    gemm(1.0, g, true, &nodes[a.0].value, false, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, adj, a) {
                    da.axpy(1.0, g);
                }
                if let Some(db) = slot(nodes, adj, b) {
                    db.axpy(1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, adj, a) {
                    da.axpy(1.0, g);
                }
                if let Some(db) = slot(nodes, adj, b) {
                    db.axpy(-1.0, g);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(da) = slot(nodes, adj, a) {
                    da.axpy(1.0, g);
                }
                if let Some(db) = slot(nodes, adj, bias) {
                    let dbs = db.as_mut_slice();
                    for r in 0..g.rows() {
                        for (x, y) in dbs.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(da) = slot(nodes, adj, a) {
                    for ((d, &gv), &o) in da.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                        if o > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = slot(nodes, adj, a) {
                    da.axpy(s, g);
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = nodes[a.0].value.cols();
                if let Some(da) = slot(nodes, adj, a) {
                    for r in 0..g.rows() {
                        for (x, y) in da.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                            *x += y;
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, b) {
                    for r in 0..g.rows() {
                        for (x, y) in db.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Rows { src, start } => {
                if let Some(ds) = slot(nodes, adj, src) {
                    let c = g.cols();
                    let dst = &mut ds.as_mut_slice()[start * c..(start + g.rows()) * c];
                    for (x, y) in dst.iter_mut().zip(g.as_slice()) {
                        *x += y;
                    }
                }
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.as_slice()[0];
                let av = &nodes[a.0].value;
                if let Some(da) = slot(nodes, adj, a) {
                    da.axpy(s, av);
                }
            }
            Op::StabilityHinge { src, ref grad } => {
                let s = g.as_slice()[0];
                if let Some(da) = slot(nodes, adj, src) {
                    da.axpy(s, grad);
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Matrix>], v: Var) -> Option<&'a mut Matrix> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let (r, c) = nodes[v.0].value.shape();
    Some(adj[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
}
