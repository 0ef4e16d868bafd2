//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter the
//! tape through [`Tape::param`], which snapshots the current value from a
//! [`ParamStore`] and remembers the name so gradients can be handed back to
//! the optimizer by name. [`Tape::backward`] consumes the tape's gradient
//! state; calling it a second time is an error.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_unchecked, sigmoid_scalar, Tensor};
use super::{NumericError, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]` (bias broadcast over rows).
    AddRow(Var, Var),
    /// Adds a one-element tensor to every entry.
    AddScalarVar(Var, Var),
    /// `a * x + b` with scalar constants.
    Affine(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Flat element gather producing a vector.
    Gather(Var, Vec<usize>),
    Sum(Var),
    LogSumExp(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_var: HashMap<usize, Tensor>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var.0)
    }

    /// Gradients of registered parameters, keyed by parameter name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named parameter as a gradient-receiving leaf. Asking for
    /// the same name twice on one tape returns the same variable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(NumericError::Dimension {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out = matmul_unchecked(ta, tb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(NumericError::Rank {
                op: "transpose",
                shape: t.shape().to_vec(),
            });
        }
        let out = t.transpose();
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !tx.is_matrix() || tb.numel() != tx.cols() {
            return Err(NumericError::Dimension {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, NumericError> {
        let ts = self.value(s);
        let Some(sv) = ts.item() else {
            return Err(NumericError::Dimension {
                op: "add_scalar_var",
                left: self.shape(x).to_vec(),
                right: ts.shape().to_vec(),
            });
        };
        let out = self.value(x).map(|v| v + sv);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::AddScalarVar(x, s), ng))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var, NumericError> {
        if c.numel() != self.value(x).numel() {
            return Err(NumericError::Dimension {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let ng = self.needs(x);
        Ok(self.push(out, Op::MulConst(x, c), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let ng = self.needs(x);
        self.push(out, Op::Ln(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let ng = self.needs(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn powf(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(k));
        let ng = self.needs(x);
        self.push(out, Op::Powf(x, k), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(NumericError::Rank {
                op: "softmax_rows",
                shape: t.shape().to_vec(),
            });
        }
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
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
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Selects rows of a matrix; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericError> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(NumericError::Rank {
                op: "gather_rows",
                shape: t.shape().to_vec(),
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), ng))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let Some(&first) = parts.first() else {
            return Err(NumericError::Empty("concat_cols"));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(NumericError::Dimension {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let Some(&first) = parts.first() else {
            return Err(NumericError::Empty("concat_rows"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != cols {
                return Err(NumericError::Dimension {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers individual elements by flat (row-major) index into a vector.
    pub fn gather(&mut self, x: Var, flat: &[usize]) -> Result<Var, NumericError> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= t.numel() {
                return Err(NumericError::Index {
                    op: "gather",
                    index: i,
                    len: t.numel(),
                });
            }
            data.push(t.data()[i]);
        }
        let out = Tensor::new(vec![flat.len()], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gather(x, flat.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var, NumericError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(NumericError::Empty("logsumexp"));
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = t.data().iter().map(|v| (v - max).exp()).sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(max + s.ln()), Op::LogSumExp(x), ng))
    }

    /// Accumulates gradients of a scalar `loss` into every leaf that
    /// requires them. The tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericError> {
        if self.consumed {
            return Err(NumericError::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(NumericError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[idx].op, Op::Leaf) {
                    out.by_var.insert(idx, g);
                }
            }
        }
        for (name, v) in &self.params {
            let g = out
                .by_var
                .get(&v.0)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.by_param.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if self.needs(*a) {
                    out.push((*a, matmul_unchecked(g, &tb.transpose())));
                }
                if self.needs(*b) {
                    out.push((*b, matmul_unchecked(&ta.transpose(), g)));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![(*a, g.zip_map(tb, |u, v| u * v)), (*b, g.zip_map(ta, |u, v| u * v))]
            }
            Op::AddRow(x, bias) => {
                let tb = self.value(*bias);
                let c = tb.numel();
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                let gb = Tensor::new(tb.shape().to_vec(), gb).expect("bias shape");
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::AddScalarVar(x, s) => {
                let total: f64 = g.data().iter().sum();
                let gs = Tensor::full(self.shape(*s), total);
                vec![(*x, g.clone()), (*s, gs)]
            }
            Op::Affine(x, a) => vec![(*x, g.map(|v| a * v))],
            Op::MulConst(x, c) => vec![(*x, g.zip_map(c, |u, v| u * v))],
            Op::Relu(x) => {
                let tx = self.value(*x);
                vec![(*x, g.zip_map(tx, |u, v| if v > 0.0 { u } else { 0.0 }))]
            }
            Op::Sigmoid(x) => vec![(*x, g.zip_map(y, |u, s| u * s * (1.0 - s)))],
            Op::Ln(x) => {
                let tx = self.value(*x);
                vec![(*x, g.zip_map(tx, |u, v| u / v))]
            }
            Op::Exp(x) => vec![(*x, g.zip_map(y, |u, e| u * e))],
            Op::Powf(x, k) => {
                let k = *k;
                let tx = self.value(*x);
                if k == 0.0 {
                    vec![(*x, Tensor::zeros(tx.shape()))]
                } else {
                    vec![(*x, g.zip_map(tx, |u, v| u * k * v.powf(k - 1.0)))]
                }
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.value(*x);
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *x,
                    g.zip_map(tx, |u, v| if v >= lo && v <= hi { u } else { 0.0 }),
                )]
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols().max(1);
                let mut out = vec![0.0; y.numel()];
                for ((orow, yrow), grow) in out
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), out).expect("shape"))]
            }
            Op::GatherRows(x, indices) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut out = Tensor::zeros(tx.shape());
                let od = out.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        od[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*x, out)]
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    out.push((p, Tensor::matrix(rows, c, data).expect("shape")));
                    offset += c;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let t = self.value(p);
                    let n = t.numel();
                    let data = g.data()[offset..offset + n].to_vec();
                    out.push((p, Tensor::new(t.shape().to_vec(), data).expect("shape")));
                    offset += n;
                }
                out
            }
            Op::Gather(x, flat) => {
                let tx = self.value(*x);
                let mut out = Tensor::zeros(tx.shape());
                let od = out.data_mut();
                for (k, &i) in flat.iter().enumerate() {
                    od[i] += g.data()[k];
                }
                vec![(*x, out)]
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(self.shape(*x), gv))]
            }
            Op::LogSumExp(x) => {
                let gv = g.data()[0];
                let lse = y.data()[0];
                vec![(*x, self.value(*x).map(|v| gv * (v - lse).exp()))]
            }
        }
    }
}
