use std::sync::Arc;

use super::{kernels, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise single-argument operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Elu,
    Exp,
    /// Natural log; errors on non-positive input.
    Log,
    /// Natural log of `max(x, floor)`; the gradient is zero where clamped.
    LogClamped(f64),
    /// `ln(1 + e^x)`, computed without overflow.
    Softplus,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Elu => "elu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::LogClamped(_) => "log_clamped",
            Unary::Softplus => "softplus",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::LogClamped(floor) => x.max(floor).ln(),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::LogClamped(floor) => {
                if x >= floor {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary(Binary, Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    /// Sum/mean over rows (`axis = 0`), columns (`axis = 1`) or everything.
    Reduce {
        input: Var,
        axis: Option<usize>,
        mean: bool,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    RowScale(Var, Var),
    RowDot(Var, Var),
    Transpose(Var),
    GroupSoftmax(Var, Arc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Unary(u, _) => u.name(),
            Op::Reduce { mean: false, .. } => "sum",
            Op::Reduce { mean: true, .. } => "mean",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Gather(..) => "gather_rows",
            Op::ScatterAdd(..) => "scatter_add_rows",
            Op::RowScale(..) => "row_scale",
            Op::RowDot(..) => "row_dot",
            Op::Transpose(_) => "transpose",
            Op::GroupSoftmax(..) => "group_softmax",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
}

/// A single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A differentiable leaf that shares storage with the caller.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, present after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node whose value contains NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<TensorError> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| TensorError::NonFinite {
                op: n.op.name(),
                node: i,
            })
        })
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let f = |p: f64, q: f64| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
        };
        let out = if x.shape() == y.shape() {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.shape(), data)?
        } else if y.numel() == 1 {
            let q = y.item();
            Tensor::new(x.shape(), x.data().iter().map(|&p| f(p, q)).collect())?
        } else if x.numel() == 1 {
            let p = x.item();
            Tensor::new(y.shape(), y.data().iter().map(|&q| f(p, q)).collect())?
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v + c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == Unary::Log {
            if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    index,
                    value,
                });
            }
        }
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| op.apply(v)).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary(op, a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("total")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a).expect("total")
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Unary::Elu, a).expect("total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(Unary::LogClamped(floor), a).expect("total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("total")
    }

    /// Sum over `axis` (`Some(0)` rows, `Some(1)` columns) or all elements.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let x = self.value(a);
        let out = match axis {
            None => {
                let s: f64 = x.data().iter().sum();
                let n = x.numel() as f64;
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(ax) => {
                let (r, c) = x.dims2(if mean { "mean" } else { "sum" })?;
                let d = x.data();
                match ax {
                    0 => {
                        let mut acc = vec![0.0; c];
                        for i in 0..r {
                            for (o, v) in acc.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                                *o += v;
                            }
                        }
                        if mean {
                            acc.iter_mut().for_each(|v| *v /= r as f64);
                        }
                        Tensor::new(&[1, c], acc)?
                    }
                    1 => {
                        let acc = (0..r)
                            .map(|i| {
                                let s: f64 = d[i * c..(i + 1) * c].iter().sum();
                                if mean {
                                    s / c as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        Tensor::new(&[r, 1], acc)?
                    }
                    _ => {
                        return Err(TensorError::Contract(format!(
                            "reduction axis {ax} out of range for rank 2"
                        )))
                    }
                }
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Reduce {
                input: a,
                axis,
                mean,
            },
            rg,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rows = self.dims2(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let cols = self.dims2(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if start >= end || end > r {
            return Err(TensorError::Contract(format!(
                "row slice {start}..{end} invalid for {r} rows"
            )));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let t = Tensor::new(&[end - start, c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let (r, c) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gather(a, idx), rg))
    }

    /// `out[idx[e]] += a[e]` into an `n`-row matrix.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        idx: impl Into<Arc<[usize]>>,
        n: usize,
    ) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let (r, c) = self.dims2(a, "scatter_add_rows")?;
        if idx.len() != r {
            return Err(TensorError::Contract(format!(
                "scatter has {} indices for {r} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Contract(format!(
                "scatter index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n * c];
        for (e, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(&src[e * c..(e + 1) * c])
            {
                *o += v;
            }
        }
        let t = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::ScatterAdd(a, idx), rg))
    }

    /// Scales row `i` of `a (n×d)` by `s[i]` where `s` is `n×1`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_scale")?;
        if self.value(s).shape() != [r, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                left: self.shape(a).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let (x, sv) = (self.value(a).data(), self.value(s).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(x[i * c..(i + 1) * c].iter().map(|v| v * sv[i]));
        }
        let t = Tensor::new(&[r, c], out)?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::RowScale(a, s), rg))
    }

    /// Row-wise inner products of two `n×d` matrices, giving `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_dot")?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "row_dot",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..r)
            .map(|i| {
                x[i * c..(i + 1) * c]
                    .iter()
                    .zip(&y[i * c..(i + 1) * c])
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect();
        let t = Tensor::new(&[r, 1], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::RowDot(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// Softmax applied independently inside each group of a partition of
    /// the elements of `scores`.
    pub fn softmax_over_groups(&mut self, scores: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let n = self.value(scores).numel();
        let mut assign = vec![usize::MAX; n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(TensorError::Contract(format!("softmax group {g} is empty")));
            }
            for &i in members {
                if i >= n {
                    return Err(TensorError::Contract(format!(
                        "softmax index {i} out of range for {n} scores"
                    )));
                }
                if assign[i] != usize::MAX {
                    return Err(TensorError::Contract(format!(
                        "softmax index {i} belongs to more than one group"
                    )));
                }
                assign[i] = g;
            }
        }
        if let Some(i) = assign.iter().position(|&g| g == usize::MAX) {
            return Err(TensorError::Contract(format!(
                "softmax index {i} belongs to no group"
            )));
        }
        self.softmax_by_assignment(scores, assign.into(), groups.len())
    }

    /// Grouped softmax where `assign[i]` names the group of element `i`.
    /// Every group id below `n_groups` must occur at least once.
    pub fn softmax_by_assignment(
        &mut self,
        scores: Var,
        assign: Arc<[usize]>,
        n_groups: usize,
    ) -> Result<Var> {
        let x = self.value(scores);
        if assign.len() != x.numel() {
            return Err(TensorError::Contract(format!(
                "{} group labels for {} scores",
                assign.len(),
                x.numel()
            )));
        }
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (&g, &v) in assign.iter().zip(x.data()) {
            if g >= n_groups {
                return Err(TensorError::Contract(format!("group id {g} >= {n_groups}")));
            }
            max[g] = max[g].max(v);
        }
        if let Some(g) = max.iter().position(|m| *m == f64::NEG_INFINITY) {
            return Err(TensorError::Contract(format!("softmax group {g} is empty")));
        }
        let exps: Vec<f64> = assign
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| (v - max[g]).exp())
            .collect();
        let mut denom = vec![0.0; n_groups];
        for (&g, &e) in assign.iter().zip(&exps) {
            denom[g] += e;
        }
        let out: Vec<f64> = assign
            .iter()
            .zip(&exps)
            .map(|(&g, &e)| e / denom[g])
            .collect();
        let t = Tensor::new(x.shape(), out)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(t, Op::GroupSoftmax(scores, assign), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::filled(self.shape(loss), 1.0);
        self.backward_with(loss, &seed)
    }

    /// Reverse sweep from `output` seeded with an upstream gradient of the
    /// same shape. Leaf gradients accumulate across calls.
    pub fn backward_with(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                left: self.shape(output).to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        // Adds `delta` into the adjoint of `v` if `v` needs a gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Matmul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                acc(*a, &mut |s| kernels::matmul_bt(g, bv.data(), s, m, k, n));
                acc(*b, &mut |s| kernels::matmul_at(av.data(), g, s, m, k, n));
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                // Gradient into one side given the other side's values.
                let side = |s: &mut [f64], this: &Tensor, other: &Tensor, sign: f64| {
                    let lift = |e: usize| -> f64 {
                        match kind {
                            Binary::Add | Binary::Sub => sign,
                            Binary::Mul => {
                                if other.numel() == 1 {
                                    other.item()
                                } else {
                                    other.data()[e]
                                }
                            }
                        }
                    };
                    if this.numel() == g.len() {
                        for (e, (si, gi)) in s.iter_mut().zip(g).enumerate() {
                            *si += gi * lift(e);
                        }
                    } else {
                        // `this` was a broadcast scalar.
                        s[0] += g
                            .iter()
                            .enumerate()
                            .map(|(e, gi)| gi * lift(e))
                            .sum::<f64>();
                    }
                };
                let sign_b = if *kind == Binary::Sub { -1.0 } else { 1.0 };
                acc(*a, &mut |s| side(s, x, y, 1.0));
                acc(*b, &mut |s| side(s, y, x, sign_b));
            }
            Op::AddScalar(a) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(si, gi)| *si += gi)
            }),
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(si, gi)| *si += gi * c)
            }),
            Op::Unary(u, a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    for (e, si) in s.iter_mut().enumerate() {
                        *si += g[e] * u.derivative(x.data()[e], out.data()[e]);
                    }
                });
            }
            Op::Reduce { input, axis, mean } => {
                let x = &nodes[input.0].value;
                let (r, c) = (x.rows(), x.cols());
                acc(*input, &mut |s| match axis {
                    None => {
                        let v = if *mean { g[0] / x.numel() as f64 } else { g[0] };
                        s.iter_mut().for_each(|si| *si += v);
                    }
                    Some(0) => {
                        let f = if *mean { 1.0 / r as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j] * f;
                            }
                        }
                    }
                    Some(_) => {
                        let f = if *mean { 1.0 / c as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[i] * f;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |s| {
                        for i in 0..rows {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(si, gi)| *si += gi)
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(*a, &mut |s| {
                    s[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(si, gi)| *si += gi)
                });
            }
            Op::Gather(a, idx) => {
                let c = out.cols();
                acc(*a, &mut |s| {
                    for (e, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[i * c + j] += g[e * c + j];
                        }
                    }
                });
            }
            Op::ScatterAdd(a, idx) => {
                let c = out.cols();
                acc(*a, &mut |s| {
                    for (e, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[e * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::RowScale(a, sc) => {
                let (x, sv) = (&nodes[a.0].value, &nodes[sc.0].value);
                let c = x.cols();
                acc(*a, &mut |s| {
                    for i in 0..x.rows() {
                        for j in 0..c {
                            s[i * c + j] += g[i * c + j] * sv.data()[i];
                        }
                    }
                });
                acc(*sc, &mut |s| {
                    for i in 0..x.rows() {
                        s[i] += (0..c)
                            .map(|j| g[i * c + j] * x.data()[i * c + j])
                            .sum::<f64>();
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = x.cols();
                acc(*a, &mut |s| {
                    for i in 0..x.rows() {
                        for j in 0..c {
                            s[i * c + j] += g[i] * y.data()[i * c + j];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..x.rows() {
                        for j in 0..c {
                            s[i * c + j] += g[i] * x.data()[i * c + j];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                // out is c×r; input is r×c
                let (r, c) = (out.cols(), out.rows());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::GroupSoftmax(a, assign) => {
                let y = out.data();
                let n_groups = assign.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_groups];
                for (e, &grp) in assign.iter().enumerate() {
                    dot[grp] += g[e] * y[e];
                }
                acc(*a, &mut |s| {
                    for (e, &grp) in assign.iter().enumerate() {
                        s[e] += y[e] * (g[e] - dot[grp]);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[&[1.5, -2.0], &[0.25, 4.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[1.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let o = g.constant(Tensor::ones(&[3, 1]));
        let zo = g.matmul(z, o).unwrap();
        assert_eq!(g.value(zo), &Tensor::zeros(&[2, 1]));
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let m1 = g.constant(Tensor::scalar(-1.0));
        let lr = g.leaky_relu(m1, 0.2);
        assert!((g.value(lr).item() + 0.2).abs() < 1e-15);
        let a = g.constant(Tensor::row_vector(vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::row_vector(vec![3.0, 4.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcasting_limited_to_scalars() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(2.0));
        let c = g.mul(a, s).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            g.log(a),
            Err(TensorError::Domain { index: 1, .. })
        ));
        let c = g.log_clamped(a, 1e-12);
        assert!((g.value(c).data()[1] - 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn grouped_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![0.7, 0.7, 3.0, 1f64.ln(), 3f64.ln()]).unwrap());
        let y = g
            .softmax_over_groups(x, &[vec![0, 1], vec![2], vec![3, 4]])
            .unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..3], &[0.5, 0.5, 1.0]);
        assert!((v[3] - 0.25).abs() < 1e-15);
        assert!((v[4] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn grouped_softmax_rejects_bad_partitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![1.0, 2.0]).unwrap());
        assert!(g.softmax_over_groups(x, &[vec![0, 1], vec![]]).is_err());
        assert!(g.softmax_over_groups(x, &[vec![0]]).is_err());
        assert!(g.softmax_over_groups(x, &[vec![0, 1], vec![1]]).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0], &[3.0]]));
        let m = g.mean(x, Some(0)).unwrap();
        let s = g.sum(x, Some(0)).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        assert_eq!(g.value(s).data(), &[4.0]);
        let one = g.constant(t(&[&[5.0, -1.0]]));
        let m1 = g.mean(one, Some(0)).unwrap();
        assert_eq!(g.value(m1).data(), &[5.0, -1.0]);
        assert!(g.sum(x, Some(2)).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(w, w).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.0));
        let s = g.sigmoid(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 1]));
        assert!(matches!(g.backward(w), Err(TensorError::Contract(_))));
    }

    #[test]
    fn backward_is_additive() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[&[0.3, -1.2]]));
        let s = g.tanh(w);
        let l = g.sum(s, None).unwrap();
        g.backward(l).unwrap();
        let once = g.grad(w).unwrap().clone();
        g.backward(l).unwrap();
        let twice = g.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let w = g.leaf(Tensor::scalar(1.5));
        let p = g.mul(c, w).unwrap();
        g.backward(p).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap().item(), 2.0);
    }

    #[test]
    fn softplus_is_finite_at_extremes() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[&[-800.0, -30.0, 0.0, 30.0, 800.0]]));
        let s = g.softplus(w);
        let y = g.value(s).data().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - (-30f64).exp()).abs() < 1e-25);
        assert!((y[2] - 2f64.ln()).abs() < 1e-15);
        assert!((y[3] - 30.0).abs() < 1e-12);
        assert_eq!(y[4], 800.0);
        let l = g.sum(s, None).unwrap();
        g.backward(l).unwrap();
        let d = g.grad(w).unwrap().data().to_vec();
        assert_eq!((d[2], d[4]), (0.5, 1.0));
        assert!(d[0] >= 0.0 && d[1] > 0.0);
    }
}
