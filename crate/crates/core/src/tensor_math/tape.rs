//! Reverse-mode accumulation over [`Matrix`] values.
//!
//! A [`Tape`] records each operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and returns the gradient of every leaf. Nodes are
//! only ever appended, so topological order is insertion order.

use super::{
    dot, gelu, gelu_derivative, layer_norm_parts, matmul_into, Matrix,
};
use crate::error::{CedError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposed(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    StackRows(Vec<Var>),
    SelectRow(Var, usize),
    L2NormalizeRows(Var, Vec<f64>),
    /// Scalar-valued node whose local gradients were computed eagerly.
    Scalar(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Records a leaf. Gradients are produced for every leaf; callers decide
    /// which ones are trainable.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_transposed(self.value(b))?;
        Ok(self.push(v, Op::MatMulTransposed(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(CedError::shape(format!(
                "bias {:?} for input {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, bv) in v.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = super::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, normalized, inv_std) = layer_norm_parts(
            self.value(x),
            self.value(gamma).as_slice(),
            self.value(beta).as_slice(),
            eps,
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(CedError::shape("gather of zero rows"));
        }
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(CedError::OutOfVocabulary {
                    id,
                    vocab_size: t.rows(),
                });
            }
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(v, Op::Gather(table, ids.to_vec())))
    }

    /// Vertical concatenation.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| CedError::shape("stack of zero parts"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(CedError::shape("row stack with differing column counts"));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::StackRows(parts.to_vec())))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let m = self.value(a);
        if row >= m.rows() {
            return Err(CedError::shape(format!("row {row} of {}", m.rows())));
        }
        let v = Matrix::row_vector(m.row(row));
        Ok(self.push(v, Op::SelectRow(a, row)))
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = dot(row, row).sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(v, Op::L2NormalizeRows(a, norms))
    }

    /// Records a `1 x 1` node with value `value` and precomputed partial
    /// derivatives with respect to each input.
    pub fn scalar(&mut self, value: f64, partials: Vec<(Var, Matrix)>) -> Result<Var> {
        for (v, g) in &partials {
            if self.value(*v).shape() != g.shape() {
                return Err(CedError::shape("partial derivative shape mismatch"));
            }
        }
        Ok(self.push(Matrix::row_vector(&[value]), Op::Scalar(partials)))
    }

    /// Gradients of the scalar node `output` with respect to every leaf.
    /// Interior nodes and leaves that do not influence `output` are `None`.
    pub fn backward(&self, output: Var) -> Result<Vec<Option<Matrix>>> {
        if self.value(output).shape() != (1, 1) {
            return Err(CedError::shape("backward from a non-scalar node"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul_transposed(bv)?;
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    matmul_into(&av.transpose(), &g, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulTransposed(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(bv)?;
                    let gb = g.transpose().matmul(av)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).as_slice();
                    let cols = normalized.cols();
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(normalized.rows(), cols);
                    let mut ggamma = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    let mut dn = vec![0.0; cols];
                    for r in 0..normalized.rows() {
                        let (nr, gr) = (normalized.row(r), g.row(r));
                        for c in 0..cols {
                            ggamma.as_mut_slice()[c] += gr[c] * nr[c];
                            gbeta.as_mut_slice()[c] += gr[c];
                            dn[c] = gr[c] * gam[c];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / n;
                        let mean_dn_n = dot(&dn, nr) / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    for (o, &xv) in gx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *o *= gelu_derivative(xv);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(offset, w)?);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::StackRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let m = self.value(*p);
                        let slice = &g.as_slice()[row * m.cols()..(row + m.rows()) * m.cols()];
                        accumulate(
                            &mut grads,
                            *p,
                            Matrix::from_vec(m.rows(), m.cols(), slice.to_vec())?,
                        );
                        row += m.rows();
                    }
                }
                Op::SelectRow(a, row) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    ga.row_mut(*row).copy_from_slice(g.row(0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * inner) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Scalar(partials) => {
                    let upstream = g.get(0, 0);
                    for (v, p) in partials {
                        accumulate(&mut grads, *v, p.scale(upstream));
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
