//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] records every operator applied during a forward pass. Leaves
//! created with [`Graph::leaf`] receive gradients from [`Graph::backward`];
//! constants do not. Nodes are appended in evaluation order, so walking the
//! tape backwards visits every node after all of its consumers.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{NumericsError, Real, Tensor};

/// Additive value used for masked attention logits.
pub const MASK_FILL: Real = -1e9;

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    AddScalar(Var),
    Scale(Var, Real),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    Softmax(Var),
    MaskedFill(Var, Vec<bool>),
    LayerNorm { x: Var, inv_std: Vec<Real> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b)))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        rec: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_rows(av.rows(), av.cols(), data);
        Ok(self.push(t, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(Real, Real) -> Real,
        rec: Op,
    ) -> Result<Var, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let n = av.cols();
        let r = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % n]))
            .collect();
        let t = Tensor::from_rows(av.rows(), n, data);
        Ok(self.push(t, rec))
    }

    /// `a (m x n) + row (1 x n)`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// `a (m x n) * row (1 x n)`, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![rows, av.cols()],
            });
        }
        let n = av.cols();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        Ok(self.push(Tensor::from_rows(rows, n, data), Op::BroadcastRows(a)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, rec: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, rec)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Real::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Real::abs, Op::Abs(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Real::cos, Op::Cos(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<Real>() / v.len() as Real;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(v.row_slice(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as Real;
        }
        self.push(Tensor::from_rows(1, n, out), Op::MeanRows(a))
    }

    /// Sum over columns: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = (0..v.rows()).map(|i| v.row_slice(i).iter().sum()).collect();
        self.push(Tensor::from_rows(v.rows(), 1, out), Op::SumCols(a))
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = v.row_slice(i);
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let start = out.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        self.push(Tensor::from_rows(m, n, out), Op::Softmax(a))
    }

    /// Replaces every entry whose `allowed` flag is false with [`MASK_FILL`].
    pub fn masked_fill(&mut self, a: Var, allowed: &[bool]) -> Result<Var, NumericsError> {
        let v = self.value(a);
        if allowed.len() != v.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_fill",
                lhs: v.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let data = v
            .data()
            .iter()
            .zip(allowed)
            .map(|(&x, &ok)| if ok { x } else { MASK_FILL })
            .collect();
        let t = Tensor::from_rows(v.rows(), v.cols(), data);
        Ok(self.push(t, Op::MaskedFill(a, allowed.to_vec())))
    }

    /// Row-wise standardization (no affine part; compose with `mul_row`/`add_row`).
    pub fn layer_norm(&mut self, a: Var, eps: Real) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = v.row_slice(i);
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / n as Real;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        self.push(Tensor::from_rows(m, n, out), Op::LayerNorm { x: a, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let m = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::from_rows(m, n, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::from_rows(m, n, data), Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let m = v.rows();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        Ok(self.push(Tensor::from_rows(m, len, data), Op::SliceCols(a, start)))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let v = self.value(a);
        if start + len > v.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let n = v.cols();
        let data = v.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::from_rows(len, n, data), Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.rows()) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let n = v.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(v.row_slice(i));
        }
        let t = Tensor::from_rows(index.len(), n, data);
        Ok(self.push(t, Op::GatherRows(a, index.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves keep their gradient; intermediate buffers are dropped.
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, data: &[Real]| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.add_assign(data),
                None => {
                    let like = &self.nodes[v.0].value;
                    *slot = Some(Tensor::from_rows(like.rows(), like.cols(), data.to_vec()));
                }
            }
        };
        let gd = g.data();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                matmul_bt_acc(gd, bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_acc(av.data(), gd, &mut db, m, k, n);
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Add(a, b) => {
                acc(*a, gd);
                acc(*b, gd);
            }
            Op::Sub(a, b) => {
                acc(*a, gd);
                let neg: Vec<Real> = gd.iter().map(|x| -x).collect();
                acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<Real> = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<Real> = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da: Vec<Real> = gd.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db: Vec<Real> = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::AddRow(a, row) => {
                acc(*a, gd);
                let n = out.cols();
                let mut dr = vec![0.0; n];
                for (i, x) in gd.iter().enumerate() {
                    dr[i % n] += x;
                }
                acc(*row, &dr);
            }
            Op::MulRow(a, row) => {
                let n = out.cols();
                let (av, rv) = (val(*a).data(), val(*row).data());
                let da: Vec<Real> = gd.iter().enumerate().map(|(i, g)| g * rv[i % n]).collect();
                let mut dr = vec![0.0; n];
                for (i, g) in gd.iter().enumerate() {
                    dr[i % n] += g * av[i];
                }
                acc(*a, &da);
                acc(*row, &dr);
            }
            Op::BroadcastRows(a) => {
                let n = out.cols();
                let mut da = vec![0.0; n];
                for (i, x) in gd.iter().enumerate() {
                    da[i % n] += x;
                }
                acc(*a, &da);
            }
            Op::AddScalar(a) => acc(*a, gd),
            Op::Scale(a, c) => {
                let da: Vec<Real> = gd.iter().map(|x| x * c).collect();
                acc(*a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                acc(*a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect();
                acc(*a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<Real> = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                acc(*a, &da);
            }
            Op::Log(a) => {
                let da: Vec<Real> = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                acc(*a, &da);
            }
            Op::Square(a) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                acc(*a, &da);
            }
            Op::Abs(a) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*a, &da);
            }
            Op::Cos(a) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| -g * x.sin())
                    .collect();
                acc(*a, &da);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, &vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, &vec![gd[0] / n as Real; n]);
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let (m, n) = (av.rows(), av.cols());
                let mut da = Vec::with_capacity(m * n);
                for _ in 0..m {
                    da.extend(gd.iter().map(|x| x / m as Real));
                }
                acc(*a, &da);
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let n = av.cols();
                let da: Vec<Real> = (0..av.len()).map(|i| gd[i / n]).collect();
                acc(*a, &da);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut da = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(n).zip(gd.chunks(n)) {
                    let dot: Real = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    da.extend(y.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                acc(*a, &da);
            }
            Op::MaskedFill(a, allowed) => {
                let da: Vec<Real> = gd
                    .iter()
                    .zip(allowed)
                    .map(|(&g, &ok)| if ok { g } else { 0.0 })
                    .collect();
                acc(*a, &da);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.cols();
                let mut da = Vec::with_capacity(out.len());
                for ((y, gr), inv) in out.data().chunks(n).zip(gd.chunks(n)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<Real>() / n as Real;
                    let mean_gy = gr.iter().zip(y).map(|(g, y)| g * y).sum::<Real>() / n as Real;
                    da.extend(
                        gr.iter()
                            .zip(y)
                            .map(|(g, y)| inv * (g - mean_g - y * mean_gy)),
                    );
                }
                acc(*x, &da);
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut dp = Vec::with_capacity(val(p).len());
                    for row in gd.chunks(n) {
                        dp.extend_from_slice(&row[offset..offset + pc]);
                    }
                    acc(p, &dp);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &gd[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let (n, len) = (av.cols(), out.cols());
                let mut da = vec![0.0; av.len()];
                for (i, row) in gd.chunks(len).enumerate() {
                    da[i * n + start..i * n + start + len].copy_from_slice(row);
                }
                acc(*a, &da);
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let n = av.cols();
                let mut da = vec![0.0; av.len()];
                da[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*a, &da);
            }
            Op::GatherRows(a, index) => {
                let av = val(*a);
                let n = av.cols();
                let mut da = vec![0.0; av.len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += gd[k * n + j];
                    }
                }
                acc(*a, &da);
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(*a, gt.data());
            }
        }
    }
}
