//! Append-only tape of primitive tensor operations with reverse-mode
//! differentiation.
//!
//! Forward evaluation is eager: every op computes its value as it is
//! recorded. [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients for every node reachable from the loss scalar.

use super::params::ParamStore;
use super::{Tensor2D, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    MulElem(NodeId, NodeId),
    DivElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    RowSoftmax(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Huber(NodeId),
    Clamp(NodeId, f64, f64),
    MaxElem(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    RowSum(NodeId),
    RowMean(NodeId),
    RowMax(NodeId),
    ColMean(NodeId),
    SumAll(NodeId),
    BroadcastRow(NodeId, usize),
    BroadcastCol(NodeId, usize),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor2D,
    op: Op,
}

/// Recorded forward computation. Values are immutable once pushed.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Tensor2D>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> &Tensor2D {
        &self.grads[id.0]
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor2D::scalar(v))
    }

    /// Insert a parameter leaf. The current value is copied onto the tape;
    /// `write_grads` later accumulates into the store by slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, TensorError> {
        let slot = store.slot(name)?;
        Ok(self.push(
            store.value_at(slot).clone(),
            Op::Leaf { param: Some(slot) },
        ))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        let (lr, lc) = self.value(a).shape();
        let (rr, rc) = self.value(b).shape();
        TensorError::ShapeMismatch {
            op,
            lhs_rows: lr,
            lhs_cols: lc,
            rhs_rows: rr,
            rhs_cols: rc,
        }
    }

    fn zip_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op_name, a, b));
        }
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor2D::from_vec(r, c, data).expect("shape checked"), op))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same_shape("mul_elem", a, b, |x, y| x * y, Op::MulElem(a, b))
    }

    pub fn div_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same_shape("div_elem", a, b, |x, y| x / y, Op::DivElem(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).cols() != self.value(b).rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = super::row_softmax(self.value(a));
        self.push(value, Op::RowSoftmax(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise Huber: x^2/2 for |x| <= 1, |x| - 1/2 otherwise.
    pub fn huber(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| {
                if x.abs() <= 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            Op::Huber(a),
        )
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same_shape("max_elem", a, b, f64::max, Op::MaxElem(a, b))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same_shape("min_elem", a, b, f64::min, Op::MinElem(a, b))
    }

    fn row_reduce(&mut self, a: NodeId, f: impl Fn(&[f64]) -> f64, op: Op) -> NodeId {
        let src = self.value(a);
        let mut out = Tensor2D::zeros(src.rows(), 1);
        for i in 0..src.rows() {
            out.set(i, 0, f(src.row(i)));
        }
        self.push(out, op)
    }

    /// Per-row sum over the feature axis, K x 1.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.row_reduce(a, |row| row.iter().sum(), Op::RowSum(a))
    }

    /// Per-row mean over the feature axis, K x 1.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        self.row_reduce(
            a,
            |row| row.iter().sum::<f64>() / row.len() as f64,
            Op::RowMean(a),
        )
    }

    /// Per-row max over the feature axis, K x 1. Gradient routes to the
    /// first maximizing entry.
    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        self.row_reduce(
            a,
            |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Op::RowMax(a),
        )
    }

    /// Column-wise mean over rows, 1 x N.
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut out = Tensor2D::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j] += src.get(i, j);
            }
        }
        for j in 0..c {
            out.data_mut()[j] /= r as f64;
        }
        self.push(out, Op::ColMean(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor2D::scalar(total), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).data().len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeat a 1 x N row `rows` times.
    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        if src.rows() != 1 {
            return Err(TensorError::BadShape {
                op: "broadcast_row",
                expected: "a 1 x N row vector",
                rows: src.rows(),
                cols: src.cols(),
            });
        }
        let c = src.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        let value = Tensor2D::from_vec(rows, c, data).expect("shape consistent");
        Ok(self.push(value, Op::BroadcastRow(a, rows)))
    }

    /// Repeat a K x 1 column `cols` times.
    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        if src.cols() != 1 {
            return Err(TensorError::BadShape {
                op: "broadcast_col",
                expected: "a K x 1 column vector",
                rows: src.rows(),
                cols: src.cols(),
            });
        }
        let r = src.rows();
        let mut out = Tensor2D::zeros(r, cols);
        for i in 0..r {
            let v = src.get(i, 0);
            for j in 0..cols {
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::BroadcastCol(a, cols)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).cols() != self.value(b).cols() {
            return Err(self.shape_err("concat_rows", a, b));
        }
        let (ra, c) = self.value(a).shape();
        let rb = self.value(b).rows();
        let mut data = Vec::with_capacity((ra + rb) * c);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor2D::from_vec(ra + rb, c, data).expect("shape consistent");
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).rows() != self.value(b).rows() {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (r, ca) = self.value(a).shape();
        let cb = self.value(b).cols();
        let mut out = Tensor2D::zeros(r, ca + cb);
        for i in 0..r {
            for j in 0..ca {
                out.set(i, j, self.value(a).get(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, self.value(b).get(i, j));
            }
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if start + len > r {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        let data = src.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor2D::from_vec(len, c, data).expect("shape consistent");
        Ok(self.push(value, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if start + len > c {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} out of bounds for {c} cols",
                start + len
            )));
        }
        let mut out = Tensor2D::zeros(r, len);
        for i in 0..r {
            for j in 0..len {
                out.set(i, j, src.get(i, start + j));
            }
        }
        Ok(self.push(out, Op::SliceCols(a, start, len)))
    }

    /// Select rows by index (duplicates allowed); gradient scatter-adds back.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid(format!(
                "gather_rows index {bad} out of bounds for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor2D::from_vec(indices.len(), c, data).expect("shape consistent");
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec())))
    }

    /// Reverse pass from a scalar loss. Gradients of nodes not on a path to
    /// the loss are exactly zero.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let (lr, lc) = self.value(loss).shape();
        if (lr, lc) != (1, 1) {
            return Err(TensorError::NotScalar { rows: lr, cols: lc });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Tensor2D::zeros(n.value.rows(), n.value.cols()))
            .collect();
        self.grads[loss.0] = Tensor2D::scalar(1.0);

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = self.grads[idx].clone();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate_scaled(b, &g, -1.0);
                }
                Op::Neg(a) => self.accumulate_scaled(a, &g, -1.0),
                Op::MulElem(a, b) => {
                    let da = g.hadamard(self.nodes[b.0].value_ref()).expect("shape");
                    let db = g.hadamard(self.nodes[a.0].value_ref()).expect("shape");
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::DivElem(a, b) => {
                    let bv = self.nodes[b.0].value_ref();
                    let av = self.nodes[a.0].value_ref();
                    let da = g.zip_with(bv, |gi, bi| gi / bi);
                    let db = g
                        .zip_with(av, |gi, ai| gi * ai)
                        .zip_with(bv, |num, bi| -num / (bi * bi));
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, s) => self.accumulate_scaled(a, &g, s),
                Op::AddConst(a) => self.accumulate(a, &g),
                Op::Matmul(a, b) => {
                    let bt = self.nodes[b.0].value_ref().transpose();
                    let at = self.nodes[a.0].value_ref().transpose();
                    let da = g.matmul(&bt).expect("shape");
                    let db = at.matmul(&g).expect("shape");
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Transpose(a) => {
                    let da = g.transpose();
                    self.accumulate(a, &da);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let (r, c) = y.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                        for j in 0..c {
                            da.set(i, j, (grow[j] - dot) * yrow[j]);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip_with(y, |gi, yi| gi * yi * (1.0 - yi));
                    self.accumulate(a, &da);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip_with(y, |gi, yi| gi * yi);
                    self.accumulate(a, &da);
                }
                Op::Ln(a) => {
                    let av = self.nodes[a.0].value_ref();
                    let da = g.zip_with(av, |gi, ai| gi / ai);
                    self.accumulate(a, &da);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip_with(y, |gi, yi| gi / (2.0 * yi.max(1e-12)));
                    self.accumulate(a, &da);
                }
                Op::Abs(a) => {
                    let av = self.nodes[a.0].value_ref();
                    let da = g.zip_with(av, |gi, ai| gi * sign(ai));
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].value_ref();
                    let da = g.zip_with(av, |gi, ai| if ai > 0.0 { gi } else { 0.0 });
                    self.accumulate(a, &da);
                }
                Op::Huber(a) => {
                    let av = self.nodes[a.0].value_ref();
                    let da = g.zip_with(av, |gi, ai| {
                        gi * if ai.abs() <= 1.0 { ai } else { sign(ai) }
                    });
                    self.accumulate(a, &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.nodes[a.0].value_ref();
                    let da = g.zip_with(av, |gi, ai| if ai >= lo && ai <= hi { gi } else { 0.0 });
                    self.accumulate(a, &da);
                }
                Op::MaxElem(a, b) => {
                    let av = self.nodes[a.0].value_ref().clone();
                    let bv = self.nodes[b.0].value_ref().clone();
                    let da = g.zip_with(&av.zip_with(&bv, |x, y| if x >= y { 1.0 } else { 0.0 }), |gi, m| gi * m);
                    let db = g.zip_with(&av.zip_with(&bv, |x, y| if x < y { 1.0 } else { 0.0 }), |gi, m| gi * m);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MinElem(a, b) => {
                    let av = self.nodes[a.0].value_ref().clone();
                    let bv = self.nodes[b.0].value_ref().clone();
                    let da = g.zip_with(&av.zip_with(&bv, |x, y| if x <= y { 1.0 } else { 0.0 }), |gi, m| gi * m);
                    let db = g.zip_with(&av.zip_with(&bv, |x, y| if x > y { 1.0 } else { 0.0 }), |gi, m| gi * m);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        for j in 0..c {
                            da.set(i, j, gi);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::RowMean(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0) / c as f64;
                        for j in 0..c {
                            da.set(i, j, gi);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::RowMax(a) => {
                    let av = self.nodes[a.0].value_ref();
                    let (r, c) = av.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        let row = av.row(i);
                        let mut best = 0;
                        for j in 1..c {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        da.set(i, best, g.get(i, 0));
                    }
                    self.accumulate(a, &da);
                }
                Op::ColMean(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            da.set(i, j, g.get(0, j) / r as f64);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let da = Tensor2D::filled(r, c, g.item());
                    self.accumulate(a, &da);
                }
                Op::BroadcastRow(a, rows) => {
                    let c = self.nodes[a.0].value.cols();
                    let mut da = Tensor2D::zeros(1, c);
                    for i in 0..rows {
                        for j in 0..c {
                            da.data_mut()[j] += g.get(i, j);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::BroadcastCol(a, cols) => {
                    let r = self.nodes[a.0].value.rows();
                    let mut da = Tensor2D::zeros(r, 1);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += g.get(i, j);
                        }
                        da.set(i, 0, acc);
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a.0].value.rows();
                    let rb = self.nodes[b.0].value.rows();
                    let c = g.cols();
                    let da = Tensor2D::from_vec(ra, c, g.data()[..ra * c].to_vec()).expect("shape");
                    let db =
                        Tensor2D::from_vec(rb, c, g.data()[ra * c..].to_vec()).expect("shape");
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.nodes[a.0].value.shape();
                    let cb = self.nodes[b.0].value.cols();
                    let mut da = Tensor2D::zeros(r, ca);
                    let mut db = Tensor2D::zeros(r, cb);
                    for i in 0..r {
                        for j in 0..ca {
                            da.set(i, j, g.get(i, j));
                        }
                        for j in 0..cb {
                            db.set(i, j, g.get(i, ca + j));
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::SliceRows(a, start, len) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..len {
                        for j in 0..c {
                            da.set(start + i, j, g.get(i, j));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        for j in 0..len {
                            da.set(i, start + j, g.get(i, j));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::GatherRows(a, ref indices) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Tensor2D::zeros(r, c);
                    for (out_i, &src_i) in indices.iter().enumerate() {
                        for j in 0..c {
                            let cur = da.get(src_i, j);
                            da.set(src_i, j, cur + g.get(out_i, j));
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, delta: &Tensor2D) {
        let slot = &mut self.grads[target.0];
        debug_assert_eq!(slot.shape(), delta.shape());
        for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    fn accumulate_scaled(&mut self, target: NodeId, delta: &Tensor2D, s: f64) {
        let slot = &mut self.grads[target.0];
        debug_assert_eq!(slot.shape(), delta.shape());
        for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *g += d * s;
        }
    }

    /// Accumulate parameter-leaf gradients into the store.
    pub fn write_grads(&self, store: &mut ParamStore) {
        if self.grads.is_empty() {
            return;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(slot) } = node.op {
                store.accumulate_grad(slot, &self.grads[idx]);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Node {
    fn value_ref(&self) -> &Tensor2D {
        &self.value
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tensor2D {
    fn zip_with(&self, rhs: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
        debug_assert_eq!(self.shape(), rhs.shape());
        Tensor2D::from_vec(
            self.rows(),
            self.cols(),
            self.data()
                .iter()
                .zip(rhs.data().iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
        .expect("shape consistent")
    }
}

// ── Composite building blocks ────────────────────────────────────────

/// x @ W + b (b broadcast across rows).
pub fn linear(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, TensorError> {
    let y = g.matmul(x, w)?;
    let rows = g.value(y).rows();
    let bb = g.broadcast_row(b, rows)?;
    g.add(y, bb)
}

/// Per-row standardization with affine, built from primitives so the
/// backward pass needs no dedicated rule. A zero-variance row maps to beta.
pub fn layer_norm_g(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let (rows, cols) = g.value(x).shape();
    if g.value(gamma).shape() != (1, cols) || g.value(beta).shape() != (1, cols) {
        let (gr, gc) = g.value(gamma).shape();
        return Err(TensorError::BadShape {
            op: "layer_norm",
            expected: "gamma/beta of shape 1 x cols",
            rows: gr,
            cols: gc,
        });
    }
    let mean = g.row_mean(x);
    let mean_b = g.broadcast_col(mean, cols)?;
    let centered = g.sub(x, mean_b)?;
    let sq = g.mul_elem(centered, centered)?;
    let var = g.row_mean(sq);
    let var_eps = g.add_const(var, eps);
    let std = g.sqrt(var_eps);
    let std_b = g.broadcast_col(std, cols)?;
    let normed = g.div_elem(centered, std_b)?;
    let gamma_b = g.broadcast_row(gamma, rows)?;
    let beta_b = g.broadcast_row(beta, rows)?;
    let scaled = g.mul_elem(normed, gamma_b)?;
    g.add(scaled, beta_b)
}

/// Smooth gate: x * sigmoid(x).
pub fn silu(g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
    let s = g.sigmoid(x);
    g.mul_elem(x, s)
}

#[cfg(test)]
mod tests {
    use super::super::{ParamStore, Tensor2D};
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn quadratic_loss_gradient_is_2x() {
        let mut store = ParamStore::new();
        store
            .insert(
                "x",
                Tensor2D::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let sq = g.mul_elem(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.write_grads(&mut store);
        let grad = store.grad("x").unwrap();
        let want = store.value("x").unwrap().scale(2.0);
        assert!(grad.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn linear_form_gradient_is_bt_broadcast() {
        let mut store = ParamStore::new();
        store
            .insert("a", Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let b_val = Tensor2D::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.constant(b_val.clone());
        let prod = g.matmul(a, b).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        g.write_grads(&mut store);
        // d/dA sum(A·B) = 1 · Bᵀ, i.e. row i of grad = column sums of Bᵀ rows
        let ones = Tensor2D::filled(2, 2, 1.0);
        let want = ones.matmul(&b_val.transpose()).unwrap();
        assert!(store.grad("a").unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor2D::scalar(2.0)).unwrap();
        store.insert("unused", Tensor2D::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "used").unwrap();
        let _dangling = g.param(&store, "unused").unwrap();
        let loss = g.mul_elem(x, x).unwrap();
        g.backward(loss).unwrap();
        g.write_grads(&mut store);
        assert_eq!(store.grad("unused").unwrap().item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.constant(Tensor2D::zeros(2, 2));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { rows: 2, cols: 2 }));
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = SplitMix64::new(99);
            store
                .insert(
                    "w",
                    Tensor2D::from_vec(3, 3, (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect())
                        .unwrap(),
                )
                .unwrap();
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let s = g.row_softmax(w);
            let l = g.ln(s);
            let h = g.huber(l);
            let loss = g.sum_all(h);
            g.backward(loss).unwrap();
            g.write_grads(&mut store);
            store.grad("w").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn layer_norm_graph_matches_plain() {
        let x_val = Tensor2D::from_rows(&[vec![1.0, 2.0, 4.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let gamma_val = Tensor2D::row_vector(vec![1.5, 0.5, 1.0]);
        let beta_val = Tensor2D::row_vector(vec![0.1, -0.2, 0.3]);
        let plain = super::super::layer_norm(&x_val, &gamma_val, &beta_val, 1e-5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(x_val);
        let gamma = g.constant(gamma_val);
        let beta = g.constant(beta_val);
        let y = layer_norm_g(&mut g, x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let mut store = ParamStore::new();
        store
            .insert("m", Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let m = g.param(&store, "m").unwrap();
        let picked = g.gather_rows(m, &[0, 0, 1]).unwrap();
        let loss = g.sum_all(picked);
        g.backward(loss).unwrap();
        g.write_grads(&mut store);
        let grad = store.grad("m").unwrap();
        assert_eq!(grad.row(0), &[2.0, 2.0]);
        assert_eq!(grad.row(1), &[1.0, 1.0]);
    }
}
