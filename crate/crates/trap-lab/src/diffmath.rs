//! Dense 64-bit arrays and reverse-mode gradient accumulation.
//!
//! The graph is rebuilt for every optimization step (the tail mask changes
//! per step), so nodes live in a flat arena and the backward pass is a
//! single reverse sweep over insertion order.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar root, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DiffError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite_all(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// 2-D element access (row-major).
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Array> {
        Array::from_vec(shape, self.data.clone())
    }

    fn zip(&self, rhs: &Array, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        if self.shape != rhs.shape {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Array {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Array) -> Result<Array> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Array) -> Result<Array> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Array) -> Result<Array> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Array) -> Result<Array> {
        self.zip(rhs, "div", |a, b| a / b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Array {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Array {
        self.map(|v| v + c)
    }

    /// tanh nudged to the open interval: saturated values round to the
    /// nearest representable double strictly inside (−1, 1), so the
    /// output is never ±1 for finite inputs.
    pub fn tanh(&self) -> Array {
        const INSIDE_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
        self.map(|v| f64::tanh(v).clamp(-INSIDE_ONE, INSIDE_ONE))
    }

    pub fn square(&self) -> Array {
        self.map(|v| v * v)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Array {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Matrix product of two 2-D arrays.
    pub fn matmul(&self, rhs: &Array) -> Result<Array> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ai = &self.data[i * k..(i + 1) * k];
            let oi = &mut out[i * n..(i + 1) * n];
            for (p, &a) in ai.iter().enumerate() {
                let bp = &rhs.data[p * n..(p + 1) * n];
                for j in 0..n {
                    oi[j] += a * bp[j];
                }
            }
        }
        Ok(Array {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Array> {
        if self.shape.len() != 2 {
            return Err(DiffError::BadShape {
                op: "transpose",
                expected: "2-D array",
                got: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Array {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sum each row of a 2-D array into a length-m vector.
    pub fn row_sum(&self) -> Result<Array> {
        if self.shape.len() != 2 {
            return Err(DiffError::BadShape {
                op: "row_sum",
                expected: "2-D array",
                got: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let data = (0..m)
            .map(|i| self.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        Ok(Array {
            shape: vec![m],
            data,
        })
    }

    /// Sum each column of a 2-D array into a length-n vector.
    pub fn col_sum(&self) -> Result<Array> {
        if self.shape.len() != 2 {
            return Err(DiffError::BadShape {
                op: "col_sum",
                expected: "2-D array",
                got: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += self.data[i * n + j];
            }
        }
        Ok(Array {
            shape: vec![n],
            data,
        })
    }

    /// Column-wise concatenation of two 2-D arrays with equal row counts.
    pub fn concat_cols(&self, rhs: &Array) -> Result<Array> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[0] != rhs.shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let m = self.shape[0];
        let (na, nb) = (self.shape[1], rhs.shape[1]);
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * na..(i + 1) * na]);
            data.extend_from_slice(&rhs.data[i * nb..(i + 1) * nb]);
        }
        Ok(Array {
            shape: vec![m, na + nb],
            data,
        })
    }

    /// Add a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&self, row: &Array) -> Result<Array> {
        if self.shape.len() != 2 || row.shape != [self.shape[1]] {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row.data[j];
            }
        }
        Ok(Array {
            shape: vec![m, n],
            data,
        })
    }
}

/// Handle into a [`Graph`]'s node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

// Some variants carry forward-pass parameters that backward never reads;
// they stay for Debug dumps of the graph.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Elementwise division by a scalar-valued node.
    DivScalarVar(Var, Var),
    Matmul(Var, Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// Elementwise product with a constant (non-differentiated) array.
    MulConst(Var, Array),
    /// gate ⊙ x² with a constant gate; the gate carries no gradient.
    GatedSquare(Var, Array),
    /// Σ w ⊙ x with constant weights w, reduced to a scalar.
    MaskedWeightedSum(Var, Array),
    /// Broadcast a scalar node to a fixed shape.
    BroadcastScalar(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    ConcatCols(Var, Var),
    AddRow(Var, Var),
}

struct Node {
    op: Op,
    value: Array,
    adjoint: Array,
}

/// Expression graph for a single forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Array) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(DiffError::NonFinite {
                op: op_name(&op),
                index,
            });
        }
        let adjoint = Array::zeros(value.shape.clone());
        self.nodes.push(Node { op, value, adjoint });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    /// A leaf that is semantically a constant. It still receives an adjoint,
    /// which callers simply never read.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn adjoint(&self, v: Var) -> &Array {
        &self.nodes[v.0].adjoint
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        self.push(Op::Div(a, b), v)
    }

    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(DiffError::BadShape {
                op: "div_scalar_var",
                expected: "scalar divisor",
                got: self.value(s).shape.clone(),
            });
        }
        let sv = self.value(s).item();
        let v = self.value(a).scale(1.0 / sv);
        self.push(Op::DivScalarVar(a, s), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).square();
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Array::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Array::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_sum()?;
        self.push(Op::RowSum(a), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).add_scalar(c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn mul_const(&mut self, a: Var, c: Array) -> Result<Var> {
        let v = self.value(a).mul(&c)?;
        self.push(Op::MulConst(a, c), v)
    }

    pub fn gated_square(&mut self, a: Var, gate: Array) -> Result<Var> {
        let v = self.value(a).square().mul(&gate)?;
        self.push(Op::GatedSquare(a, gate), v)
    }

    pub fn masked_weighted_sum(&mut self, a: Var, w: Array) -> Result<Var> {
        let v = Array::scalar(self.value(a).mul(&w)?.sum());
        self.push(Op::MaskedWeightedSum(a, w), v)
    }

    pub fn broadcast_scalar(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if !self.value(a).is_scalar() {
            return Err(DiffError::BadShape {
                op: "broadcast_scalar",
                expected: "scalar input",
                got: self.value(a).shape.clone(),
            });
        }
        let v = Array::full(shape.clone(), self.value(a).item());
        self.push(Op::BroadcastScalar(a, shape), v)
    }

    /// Clamp with pass-through gradient strictly inside (lo, hi).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).clamp(lo, hi);
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        self.push(Op::AddRow(a, row), v)
    }

    pub fn zero_adjoints(&mut self) {
        for node in &mut self.nodes {
            node.adjoint.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn accumulate(&mut self, target: Var, contrib: &Array) {
        let adj = &mut self.nodes[target.0].adjoint;
        debug_assert_eq!(adj.shape, contrib.shape);
        for (a, c) in adj.data.iter_mut().zip(&contrib.data) {
            *a += c;
        }
    }

    /// Reverse sweep from a scalar root. Each leaf's adjoint afterwards holds
    /// ∂root/∂leaf. Adjoints are zeroed first, so repeated calls agree.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(DiffError::NonScalarRoot {
                got: self.value(root).shape.clone(),
            });
        }
        self.zero_adjoints();
        self.nodes[root.0].adjoint.data[0] = 1.0;
        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].adjoint.clone();
            if g.data.iter().all(|v| *v == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.nodes[b.0].value).unwrap();
                    let gb = g.mul(&self.nodes[a.0].value).unwrap();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Div(a, b) => {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = g.div(&bv).unwrap();
                    let y = self.nodes[i].value.clone();
                    let gb = g.mul(&y).unwrap().div(&bv).unwrap().scale(-1.0);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::DivScalarVar(a, s) => {
                    let sv = self.nodes[s.0].value.item();
                    self.accumulate(a, &g.scale(1.0 / sv));
                    let av = &self.nodes[a.0].value;
                    let gs: f64 = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(gi, ai)| -gi * ai / (sv * sv))
                        .sum();
                    self.accumulate(s, &Array::scalar(gs));
                }
                Op::Matmul(a, b) => {
                    let bt = self.nodes[b.0].value.transpose().unwrap();
                    let at = self.nodes[a.0].value.transpose().unwrap();
                    let ga = g.matmul(&bt).unwrap();
                    let gb = at.matmul(&g).unwrap();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.mul(&y.map(|t| 1.0 - t * t)).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::Exp(a) => {
                    let ga = g.mul(&self.nodes[i].value).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::Ln(a) => {
                    let ga = g.div(&self.nodes[a.0].value).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::Square(a) => {
                    let ga = g.mul(&self.nodes[a.0].value.scale(2.0)).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape.clone();
                    self.accumulate(a, &Array::full(shape, g.item()));
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let shape = self.nodes[a.0].value.shape.clone();
                    self.accumulate(a, &Array::full(shape, g.item() / n));
                }
                Op::RowSum(a) => {
                    let shape = self.nodes[a.0].value.shape.clone();
                    let (m, n) = (shape[0], shape[1]);
                    let mut ga = Array::zeros(shape);
                    for r in 0..m {
                        for c in 0..n {
                            ga.data[r * n + c] = g.data[r];
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::Scale(a, c) => self.accumulate(a, &g.scale(c)),
                Op::AddScalar(a, _) => self.accumulate(a, &g),
                Op::MulConst(a, c) => {
                    let ga = g.mul(&c).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::GatedSquare(a, gate) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g.mul(&gate).unwrap().mul(&av.scale(2.0)).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::MaskedWeightedSum(a, w) => {
                    let ga = w.scale(g.item());
                    self.accumulate(a, &ga);
                }
                Op::BroadcastScalar(a, _) => {
                    self.accumulate(a, &Array::scalar(g.sum()));
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    let mask = av.map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    let ga = g.mul(&mask).unwrap();
                    self.accumulate(a, &ga);
                }
                Op::ConcatCols(a, b) => {
                    let sa = self.nodes[a.0].value.shape.clone();
                    let sb = self.nodes[b.0].value.shape.clone();
                    let (m, na, nb) = (sa[0], sa[1], sb[1]);
                    let mut ga = Array::zeros(sa);
                    let mut gb = Array::zeros(sb);
                    for r in 0..m {
                        for c in 0..na {
                            ga.data[r * na + c] = g.data[r * (na + nb) + c];
                        }
                        for c in 0..nb {
                            gb.data[r * nb + c] = g.data[r * (na + nb) + na + c];
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(a, &g);
                    let gr = g.col_sum().unwrap();
                    self.accumulate(row, &gr);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::DivScalarVar(..) => "div_scalar_var",
        Op::Matmul(..) => "matmul",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::RowSum(..) => "row_sum",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MulConst(..) => "mul_const",
        Op::GatedSquare(..) => "gated_square",
        Op::MaskedWeightedSum(..) => "masked_weighted_sum",
        Op::BroadcastScalar(..) => "broadcast_scalar",
        Op::Clamp(..) => "clamp",
        Op::ConcatCols(..) => "concat_cols",
        Op::AddRow(..) => "add_row",
    }
}

/// Compare the analytic gradient of a scalar-valued graph function against
/// central finite differences. Returns the max relative error over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone())?;
    let root = f(&mut g, xv)?;
    g.backward(root)?;
    let analytic = g.adjoint(xv).clone();

    let eval = |x: &Array| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone())?;
        let root = f(&mut g, xv)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite {
                op: "grad_check eval",
                index: 0,
            });
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let fp = eval(&xp).map_err(|_| DiffError::NonFinite {
            op: "grad_check",
            index: i,
        })?;
        let fm = eval(&xm).map_err(|_| DiffError::NonFinite {
            op: "grad_check",
            index: i,
        })?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
