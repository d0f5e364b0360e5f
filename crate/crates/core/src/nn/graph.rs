//! Recorded computation trace with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, stores its output and remembers its inputs; [`Graph::backward`]
//! walks the trace in reverse and applies each op's vector-Jacobian product.
//! Parameter leaves keep their [`ParamId`] so gradients can be folded back into
//! a [`ParamStore`].

use super::param::{ParamId, ParamStore};
use super::tensor::{log_softmax, matmul_raw, softmax_unchecked, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Var, Var),
    ColSlice(Var, usize),
    RowSlice(Var, usize),
    StackRows(Vec<Var>),
    Transpose(Var),
    SoftmaxRows(Var),
    CrossEntropyRows(Var, Vec<usize>),
    CosineRows(Var, Tensor),
    LocationConv(Var, Var),
    Sum(Var),
    /// Scalar loss whose gradient w.r.t. the input was computed in the forward pass.
    External(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root w.r.t. every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf(None))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_unchecked(store.tensor(id).clone(), Op::Leaf(Some(id)))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `x W + b` for row-major `x (T x in)`, `W (in x out)`, `b (1 x out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::dims("add_row", ta.shape(), tr.shape()));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Scale(a, c), "scale")
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, sigmoid);
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a), "tanh")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dims("concat_cols", ta.shape(), tb.shape()));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::from_vec(rows, ca + cb, data)?;
        self.push(value, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::dims("col_slice", ta.shape(), &[start, len]));
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(rows, len, data)?;
        self.push(value, Op::ColSlice(a, start), "col_slice")
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ta = self.value(a);
        if r >= ta.rows() {
            return Err(Error::dims("row", ta.shape(), &[r]));
        }
        let value = Tensor::row_vector(ta.row(r).to_vec());
        self.push(value, Op::RowSlice(a, r), "row")
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = rows.iter().map(|v| self.value(*v)).collect();
        if parts.is_empty() {
            return Err(Error::Invalid("stack_rows of zero rows".into()));
        }
        let value = Tensor::vstack(&parts)?;
        self.push(value, Op::StackRows(rows.to_vec()), "stack_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            data.extend(softmax_unchecked(ta.row(r)));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Sum over rows of `-log softmax(logits[u])[targets[u]]`, a `1 x 1` result.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != targets.len() {
            return Err(Error::dims("cross_entropy_rows", t.shape(), &[targets.len()]));
        }
        let mut loss = 0.0;
        for (u, &y) in targets.iter().enumerate() {
            if y >= t.cols() {
                return Err(Error::Invalid(format!("target index {y} out of range")));
            }
            loss -= log_softmax(t.row(u))[y];
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows(logits, targets.to_vec()),
            "cross_entropy_rows",
        )
    }

    /// Row-wise cosine similarity of `q (T x D)` against the columns of a
    /// constant `memory (D x N)`, giving `T x N`.
    pub fn cosine_rows(&mut self, q: Var, memory: &Tensor) -> Result<Var> {
        let tq = self.value(q);
        if tq.cols() != memory.rows() {
            return Err(Error::dims("cosine_rows", tq.shape(), memory.shape()));
        }
        let (rows, d, n) = (tq.rows(), tq.cols(), memory.cols());
        let col_norms: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|i| memory.get(i, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        if col_norms.iter().any(|v| *v == 0.0) {
            return Err(Error::Degenerate("zero-norm memory column".into()));
        }
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let qr = tq.row(r);
            let qn = qr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if qn == 0.0 {
                return Err(Error::Degenerate(format!("zero-norm query at frame {r}")));
            }
            for (j, mn) in col_norms.iter().enumerate() {
                let dot: f64 = (0..d).map(|i| qr[i] * memory.get(i, j)).sum();
                data.push(dot / (qn * mn));
            }
        }
        let value = Tensor::from_vec(rows, n, data)?;
        self.push(value, Op::CosineRows(q, memory.clone()), "cosine_rows")
    }

    /// Location features: `out[t, k] = sum_j filter[k, j] * prev[t + j - W/2]`
    /// for `prev (1 x T)`, `filter (K x W)`, zero padded; result is `T x K`.
    pub fn location_conv(&mut self, prev: Var, filter: Var) -> Result<Var> {
        let (tp, tf) = (self.value(prev), self.value(filter));
        if tp.rows() != 1 {
            return Err(Error::dims("location_conv", tp.shape(), tf.shape()));
        }
        let (t_len, k, w) = (tp.cols(), tf.rows(), tf.cols());
        let half = w / 2;
        let mut out = Tensor::zeros(t_len, k);
        for t in 0..t_len {
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..w {
                    if let Some(src) = (t + j).checked_sub(half).filter(|s| *s < t_len) {
                        acc += tf.get(c, j) * tp.data()[src];
                    }
                }
                out.set(t, c, acc);
            }
        }
        self.push(out, Op::LocationConv(prev, filter), "location_conv")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Records a scalar loss computed outside the graph together with its
    /// gradient w.r.t. `input`.
    pub fn external_loss(&mut self, input: Var, loss: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::dims("external_loss", self.shape(input), grad.shape()));
        }
        self.push(Tensor::scalar(loss), Op::External(input, grad), "external_loss")
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::dims("backward", self.shape(root), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of parameter leaves into the store's accumulators.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let bt = tb.transpose();
                let da = matmul_raw(dy.data(), bt.data(), m, n, k);
                acc(grads, *a, Tensor::from_vec(m, k, da).unwrap());
                let at = ta.transpose();
                let db = matmul_raw(at.data(), dy.data(), k, m, n);
                acc(grads, *b, Tensor::from_vec(k, n, db).unwrap());
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, dy.clone());
                let n = dy.cols();
                let mut dr = vec![0.0; n];
                for (idx, g) in dy.data().iter().enumerate() {
                    dr[idx % n] += g;
                }
                acc(grads, *r, Tensor::row_vector(dr));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, scaled(dy, -1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, hadamard(dy, self.value(*b)));
                acc(grads, *b, hadamard(dy, self.value(*a)));
            }
            Op::Scale(a, c) => acc(grads, *a, scaled(dy, *c)),
            Op::Sigmoid(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Tanh(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = dy.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = dy.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(grads, *a, Tensor::from_vec(rows, ca, da).unwrap());
                acc(grads, *b, Tensor::from_vec(rows, cb, db).unwrap());
            }
            Op::ColSlice(a, start) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..dy.rows() {
                    for (c, g) in dy.row(r).iter().enumerate() {
                        da.set(r, start + c, *g);
                    }
                }
                acc(grads, *a, da);
            }
            Op::RowSlice(a, r) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for (c, g) in dy.data().iter().enumerate() {
                    da.set(*r, c, *g);
                }
                acc(grads, *a, da);
            }
            Op::StackRows(rows) => {
                let mut offset = 0;
                for v in rows {
                    let (nr, nc) = (self.value(*v).rows(), self.value(*v).cols());
                    let part = dy.data()[offset * nc..(offset + nr) * nc].to_vec();
                    acc(grads, *v, Tensor::from_vec(nr, nc, part).unwrap());
                    offset += nr;
                }
            }
            Op::Transpose(a) => acc(grads, *a, dy.transpose()),
            Op::SoftmaxRows(a) => {
                let mut d = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(p, g)| p * (g - dot)));
                }
                acc(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::CrossEntropyRows(logits, targets) => {
                let t = self.value(*logits);
                let g = dy.item();
                let mut d = Vec::with_capacity(t.len());
                for (u, &target) in targets.iter().enumerate() {
                    let p = softmax_unchecked(t.row(u));
                    d.extend(p.iter().enumerate().map(|(v, pv)| {
                        g * (pv - if v == target { 1.0 } else { 0.0 })
                    }));
                }
                acc(grads, *logits, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::CosineRows(q, memory) => {
                let tq = self.value(*q);
                let (d, n) = (memory.rows(), memory.cols());
                let col_norms: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|i| memory.get(i, j).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let mut dq = Tensor::zeros(tq.rows(), d);
                for r in 0..tq.rows() {
                    let qr = tq.row(r);
                    let qn = qr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for j in 0..n {
                        let g = dy.get(r, j);
                        let k = y.get(r, j);
                        for i in 0..d {
                            let v = dq.get(r, i)
                                + g * (memory.get(i, j) / (qn * col_norms[j]) - k * qr[i] / (qn * qn));
                            dq.set(r, i, v);
                        }
                    }
                }
                acc(grads, *q, dq);
            }
            Op::LocationConv(prev, filter) => {
                let (tp, tf) = (self.value(*prev), self.value(*filter));
                let (t_len, k, w) = (tp.cols(), tf.rows(), tf.cols());
                let half = w / 2;
                let mut dp = vec![0.0; t_len];
                let mut df = Tensor::zeros(k, w);
                for t in 0..t_len {
                    for c in 0..k {
                        let g = dy.get(t, c);
                        for j in 0..w {
                            if let Some(src) = (t + j).checked_sub(half).filter(|s| *s < t_len) {
                                dp[src] += g * tf.get(c, j);
                                df.set(c, j, df.get(c, j) + g * tp.data()[src]);
                            }
                        }
                    }
                }
                acc(grads, *prev, Tensor::row_vector(dp));
                acc(grads, *filter, df);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), vec![dy.item(); ta.len()]).unwrap());
            }
            Op::External(a, g) => acc(grads, *a, scaled(g, dy.item())),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).unwrap()
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
    .unwrap()
}
