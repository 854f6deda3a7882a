//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive op in creation order. Node indices only
//! ever point backwards, so the record is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use oner_core::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(2.0).unwrap());
//! let y = tape.param(Tensor::scalar(3.0).unwrap());
//! let f = tape.mul(x, y).unwrap();
//! tape.backward(f).unwrap();
//! assert_eq!(tape.grad(x).item().unwrap(), 3.0);
//! assert_eq!(tape.grad(y).item().unwrap(), 2.0);
//! ```

use crate::error::{Error, Result};

use super::tensor::{dot, norm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Tensor times a scalar node.
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Euclidean norm of all elements.
    Norm(Var),
    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    Cosine(Var, Var),
    NormalizeRows(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Gelu(Var),
    /// Per-row maximum; remembers the winning column of each row.
    RowMax(Var, Vec<usize>),
    /// Maximum over all elements; remembers the winning index.
    MaxAll(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | ScaleBy(a, b)
            | MatMul(a, b)
            | MatMulT(a, b)
            | Cosine(a, b) => vec![*a, *b],
            Scale(a, _)
            | Sum(a)
            | Mean(a)
            | Norm(a)
            | NormalizeRows(a)
            | SoftmaxRows(a)
            | LayerNormRows(a)
            | Gelu(a)
            | RowMax(a, _)
            | MaxAll(a, _)
            | SliceRows(a, _, _)
            | SliceCols(a, _, _) => vec![*a],
            ConcatRows(vs) | ConcatCols(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An ordered record of primitive ops with their forward values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
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

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`Tape::backward`]; zeros for nodes that did not
    /// participate or do not require a gradient.
    pub fn grad(&self, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        name: &'static str,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Add(a, b), shape, data, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sub(a, b), shape, data, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Mul(a, b), shape, data, "mul")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", &[ta.cols()], tr.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % c])
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Op::AddRow(a, row), shape, data, "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Scale(a, factor), shape, data, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a * s` where `s` is a one-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Op::ScaleBy(a, s), shape, data, "scale_by")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", &[ta.cols(), tb.cols()], tb.shape()));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        self.push(Op::MatMul(a, b), vec![n, m], data, "matmul")
    }

    /// `a · bᵀ`, the row-by-row dot-product matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_t", &[tb.rows(), ta.cols()], tb.shape()));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(dot(ta.row(i), tb.row(j)));
            }
        }
        self.push(Op::MatMulT(a, b), vec![n, m], data, "matmul_t")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), vec![], vec![s], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::domain("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), vec![], vec![s], "mean")
    }

    /// Euclidean norm over all elements. The gradient at the origin is taken as 0.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = norm(self.value(a).data());
        self.push(Op::Norm(a), vec![], vec![n], "norm")
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let c = super::tensor::cosine_similarity(self.value(a).data(), self.value(b).data())?;
        self.push(Op::Cosine(a, b), vec![], vec![c], "cosine")
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for (i, r) in t.row_iter().enumerate() {
            let n = norm(r);
            if n == 0.0 {
                return Err(Error::domain(format!(
                    "normalize_rows: row {i} has zero norm"
                )));
            }
            data.extend(r.iter().map(|x| x / n));
        }
        let shape = t.shape().to_vec();
        self.push(Op::NormalizeRows(a), shape, data, "normalize_rows")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for r in t.row_iter() {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|x| x / z));
        }
        let shape = t.shape().to_vec();
        self.push(Op::SoftmaxRows(a), shape, data, "softmax_rows")
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for r in t.row_iter() {
            let (mu, sigma) = row_moments(r);
            data.extend(r.iter().map(|x| (x - mu) / sigma));
        }
        let shape = t.shape().to_vec();
        self.push(Op::LayerNormRows(a), shape, data, "layer_norm_rows")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        self.push(Op::Gelu(a), shape, data, "gelu")
    }

    /// Per-row maximum as a column vector. Ties go to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::domain("row_max over zero columns"));
        }
        let mut data = Vec::with_capacity(t.rows());
        let mut arg = Vec::with_capacity(t.rows());
        for r in t.row_iter() {
            let (j, m) = argmax(r);
            data.push(m);
            arg.push(j);
        }
        let rows = t.rows();
        self.push(Op::RowMax(a, arg), vec![rows, 1], data, "row_max")
    }

    /// Maximum over all elements. Ties go to the lowest index.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::domain("max over an empty tensor"));
        }
        let (j, m) = argmax(t.data());
        self.push(Op::MaxAll(a, j), vec![], vec![m], "max_all")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", &[cols], &[t.cols()]));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            vec![rows, cols],
            data,
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::contract(format!(
                "slice_rows {start}..{end} out of range for {} rows",
                t.rows()
            )));
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        self.push(
            Op::SliceRows(a, start, end),
            vec![end - start, c],
            data,
            "slice_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", &[rows], &[t.rows()]));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            vec![rows, cols],
            data,
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for {} cols",
                t.cols()
            )));
        }
        let data = t
            .row_iter()
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let rows = t.rows();
        self.push(
            Op::SliceCols(a, start, end),
            vec![rows, end - start],
            data,
            "slice_cols",
        )
    }

    /// Checks that every op only reads earlier nodes.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(Error::contract(format!(
                    "tape is not acyclic: node {i} reads node {}",
                    bad.0
                )));
            }
        }
        Ok(())
    }

    /// Computes d`loss`/d`v` for every `param` leaf, replacing any gradients
    /// left over from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.validate()?;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of node {i}")));
                    }
                    grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                accumulate(adj, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, val(*b).data(), |x, y| x * y);
                let db = zip_map(g, val(*a).data(), |x, y| x * y);
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::AddRow(a, r) => {
                accumulate(adj, *a, g);
                let c = val(*r).len();
                let mut dr = vec![0.0; c];
                for (k, x) in g.iter().enumerate() {
                    dr[k % c] += x;
                }
                accumulate(adj, *r, &dr);
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|x| x * f).collect();
                accumulate(adj, *a, &da);
            }
            Op::ScaleBy(a, s) => {
                let factor = val(*s).data()[0];
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                let ds = dot(g, val(*a).data());
                accumulate(adj, *a, &da);
                accumulate(adj, *s, &[ds]);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G Bᵀ, dB = Aᵀ G
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; k * m];
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    let arow = ta.row(r);
                    for p in 0..k {
                        let brow = tb.row(p);
                        da[r * k + p] = dot(grow, brow);
                        let av = arow[p];
                        if av != 0.0 {
                            for (dbv, gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *dbv += av * gv;
                            }
                        }
                    }
                }
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, m, k) = (ta.rows(), tb.rows(), ta.cols());
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; m * k];
                for r in 0..n {
                    for c in 0..m {
                        let gv = g[r * m + c];
                        if gv == 0.0 {
                            continue;
                        }
                        let (arow, brow) = (ta.row(r), tb.row(c));
                        for p in 0..k {
                            da[r * k + p] += gv * brow[p];
                            db[c * k + p] += gv * arow[p];
                        }
                    }
                }
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; val(*a).len()];
                accumulate(adj, *a, &da);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let da = vec![g[0] / n as f64; n];
                accumulate(adj, *a, &da);
            }
            Op::Norm(a) => {
                let n = out.data()[0];
                let ta = val(*a);
                let da: Vec<f64> = if n == 0.0 {
                    vec![0.0; ta.len()]
                } else {
                    ta.data().iter().map(|x| g[0] * x / n).collect()
                };
                accumulate(adj, *a, &da);
            }
            Op::Cosine(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                let (na, nb) = (norm(xa), norm(xb));
                let c = dot(xa, xb) / (na * nb);
                let da: Vec<f64> = xa
                    .iter()
                    .zip(xb)
                    .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db: Vec<f64> = xa
                    .iter()
                    .zip(xb)
                    .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::NormalizeRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut da = Vec::with_capacity(ta.len());
                for (r, x) in ta.row_iter().enumerate() {
                    let n = norm(x);
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let yg = dot(y, gr);
                    da.extend(gr.iter().zip(y).map(|(gv, yv)| (gv - yv * yg) / n));
                }
                accumulate(adj, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut da = Vec::with_capacity(out.len());
                for (r, y) in out.row_iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let yg = dot(y, gr);
                    da.extend(gr.iter().zip(y).map(|(gv, yv)| yv * (gv - yg)));
                }
                accumulate(adj, *a, &da);
            }
            Op::LayerNormRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let cf = c as f64;
                let mut da = Vec::with_capacity(ta.len());
                for (r, x) in ta.row_iter().enumerate() {
                    let (_, sigma) = row_moments(x);
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let gm = gr.iter().sum::<f64>() / cf;
                    let gy = dot(gr, y) / cf;
                    da.extend(gr.iter().zip(y).map(|(gv, yv)| (gv - gm - yv * gy) / sigma));
                }
                accumulate(adj, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        gv * d
                    })
                    .collect();
                accumulate(adj, *a, &da);
            }
            Op::RowMax(a, arg) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for (r, &j) in arg.iter().enumerate() {
                    da[r * c + j] = g[r];
                }
                accumulate(adj, *a, &da);
            }
            Op::MaxAll(a, j) => {
                let mut da = vec![0.0; val(*a).len()];
                da[*j] = g[0];
                accumulate(adj, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    accumulate(adj, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows(a, start, end) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                da[start * c..end * c].copy_from_slice(g);
                accumulate(adj, *a, &da);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col_off = 0;
                for &p in parts {
                    let tp = val(p);
                    let pc = tp.cols();
                    let mut dp = Vec::with_capacity(tp.len());
                    for r in 0..tp.rows() {
                        dp.extend_from_slice(&g[r * total + col_off..r * total + col_off + pc]);
                    }
                    accumulate(adj, p, &dp);
                    col_off += pc;
                }
            }
            Op::SliceCols(a, start, end) => {
                let ta = val(*a);
                let c = ta.cols();
                let w = end - start;
                let mut da = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    da[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(adj, *a, &da);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (j, x);
        }
    }
    best
}

fn row_moments(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mu = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}
