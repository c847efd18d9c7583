//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Values are 2-D (`[rows×cols]`); a batch is a stack of rows. Parameters
//! are borrowed from their [`ParamStore`], so building a tape never copies
//! weights. `backward` consumes the tape and returns gradients keyed by the
//! originating store.

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_t, relu, sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param { store: u64, id: ParamId },
    MatMulT(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    SegmentMean { x: NodeId, segs: Vec<usize> },
    NeighbourMean { x: NodeId, segs: Vec<usize> },
    Gather { x: NodeId, rows: Vec<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    Tensor::from_parts(vec![r, c], t.into_data())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(as_matrix(t), Op::Input, false)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(store.value(id)),
            op: Op::Param { store: store.uid(), id },
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter read as a constant: same value, no gradient routed back.
    pub fn frozen_param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(store.value(id)),
            op: Op::Input,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let y = matmul_t(self.value(x), self.value(w))?;
        let ng = self.needs(&[x, w]);
        Ok(self.push(y, Op::MatMulT(x, w), ng))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let y = super::tensor::add_row(self.value(x), self.value(b))?;
        let ng = self.needs(&[x, b]);
        Ok(self.push(y, Op::AddRow(x, b), ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(relu);
        let ng = self.needs(&[x]);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        let ng = self.needs(&[x]);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::Shape("concat of nothing".into())),
        };
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Shape(format!("concat rows {} vs {rows}", v.rows())));
            }
            width += v.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, width], out), Op::Concat(parts.to_vec()), ng))
    }

    /// Mean of the rows in each segment; `segs[r]` is row r's segment and
    /// the output has `n_segments` rows. Empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: NodeId, segs: Vec<usize>, n_segments: usize) -> Result<NodeId> {
        let v = self.value(x);
        if segs.len() != v.rows() || segs.iter().any(|&s| s >= n_segments) {
            return Err(Error::Shape("segment ids do not match rows".into()));
        }
        let c = v.cols();
        let mut out = vec![0.0; n_segments * c];
        let mut counts = vec![0usize; n_segments];
        for (r, &s) in segs.iter().enumerate() {
            counts[s] += 1;
            for (o, xv) in out[s * c..(s + 1) * c].iter_mut().zip(v.row_slice(r)) {
                *o += xv;
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[s * c..(s + 1) * c].iter_mut().for_each(|o| *o /= n as f64);
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n_segments, c], out), Op::SegmentMean { x, segs }, ng))
    }

    /// For each row, the mean of all *other* rows of the same segment
    /// (a fully connected neighbourhood without self-loops). A row alone in
    /// its segment receives zeros.
    pub fn neighbour_mean(&mut self, x: NodeId, segs: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if segs.len() != v.rows() {
            return Err(Error::Shape("segment ids do not match rows".into()));
        }
        let out = neighbour_mean(v, &segs);
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::NeighbourMean { x, segs }, ng))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(Error::Shape(format!("row {bad} out of {}", v.rows())));
        }
        let c = v.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(v.row_slice(r));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![rows.len(), c], out), Op::Gather { x, rows }, ng))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("elementwise {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let y = self.value(a).map(|v| v * k);
        let ng = self.needs(&[a]);
        self.push(y, Op::Scale(a, k), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let y = self.value(a).map(|v| v * v);
        let ng = self.needs(&[a]);
        self.push(y, Op::Square(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum::<f64>();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = node.value.get();
            match &node.op {
                Op::Input => {}
                Op::Param { store, id } => out.push(*store, *id, dy),
                Op::MatMulT(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (b, inp, outw) = (xv.rows(), xv.cols(), wv.rows());
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; b * inp];
                        for r in 0..b {
                            let dyr = dy.row_slice(r);
                            let dxr = &mut dx[r * inp..(r + 1) * inp];
                            for (o, &g) in dyr.iter().enumerate() {
                                if g != 0.0 {
                                    axpy(g, wv.row_slice(o), dxr);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_parts(vec![b, inp], dx));
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; outw * inp];
                        for r in 0..b {
                            let xr = xv.row_slice(r);
                            for (o, &g) in dy.row_slice(r).iter().enumerate() {
                                if g != 0.0 {
                                    axpy(g, xr, &mut dw[o * inp..(o + 1) * inp]);
                                }
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.nodes[bias.0].needs_grad {
                        let c = dy.cols();
                        let mut db = vec![0.0; c];
                        for r in 0..dy.rows() {
                            for (d, g) in db.iter_mut().zip(dy.row_slice(r)) {
                                *d += g;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Tensor::from_parts(shape, db));
                    }
                    accumulate(&mut grads, *x, dy);
                }
                Op::Relu(x) => {
                    let data = dy.data().iter().zip(y.data()).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(dy.shape().to_vec(), data));
                }
                Op::Sigmoid(x) => {
                    let data = dy.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(dy.shape().to_vec(), data));
                }
                Op::Concat(parts) => {
                    let rows = dy.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&dy.row_slice(r)[offset..offset + c]);
                            }
                            accumulate(&mut grads, p, Tensor::from_parts(vec![rows, c], d));
                        }
                        offset += c;
                    }
                }
                Op::SegmentMean { x, segs } => {
                    let c = dy.cols();
                    let mut counts = vec![0usize; dy.rows()];
                    segs.iter().for_each(|&s| counts[s] += 1);
                    let mut d = Vec::with_capacity(segs.len() * c);
                    for &s in segs {
                        let k = 1.0 / counts[s] as f64;
                        d.extend(dy.row_slice(s).iter().map(|g| g * k));
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(vec![segs.len(), c], d));
                }
                Op::NeighbourMean { x, segs } => {
                    // the operator is symmetric, so its adjoint is itself
                    accumulate(&mut grads, *x, neighbour_mean(&dy, segs));
                }
                Op::Gather { x, rows } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut d = vec![0.0; xv.rows() * c];
                    for (k, &r) in rows.iter().enumerate() {
                        for (t, g) in d[r * c..(r + 1) * c].iter_mut().zip(dy.row_slice(k)) {
                            *t += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(vec![xv.rows(), c], d));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, dy.map(|g| -g));
                    accumulate(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = dy.data().iter().zip(vb.data()).map(|(g, v)| g * v).collect();
                    let db = dy.data().iter().zip(va.data()).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(dy.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::from_parts(dy.shape().to_vec(), db));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, *a, dy.map(|g| g * k));
                }
                Op::Square(a) => {
                    let va = self.value(*a);
                    let data = dy.data().iter().zip(va.data()).map(|(g, v)| 2.0 * g * v).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(dy.shape().to_vec(), data));
                }
                Op::MeanAll(a) => {
                    let va = self.value(*a);
                    let g = dy.data()[0] / va.len().max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::from_parts(va.shape().to_vec(), vec![g; va.len()]));
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let g = dy.data()[0];
                    accumulate(&mut grads, *a, Tensor::from_parts(va.shape().to_vec(), vec![g; va.len()]));
                }
            }
        }
        Ok(out)
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn neighbour_mean(v: &Tensor, segs: &[usize]) -> Tensor {
    let c = v.cols();
    let n_seg = segs.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; n_seg * c];
    let mut counts = vec![0usize; n_seg];
    for (r, &s) in segs.iter().enumerate() {
        counts[s] += 1;
        for (o, xv) in sums[s * c..(s + 1) * c].iter_mut().zip(v.row_slice(r)) {
            *o += xv;
        }
    }
    let mut out = vec![0.0; segs.len() * c];
    for (r, &s) in segs.iter().enumerate() {
        if counts[s] < 2 {
            continue;
        }
        let k = 1.0 / (counts[s] - 1) as f64;
        let row = &mut out[r * c..(r + 1) * c];
        for ((o, sum), xv) in row.iter_mut().zip(&sums[s * c..(s + 1) * c]).zip(v.row_slice(r)) {
            *o = (sum - xv) * k;
        }
    }
    Tensor::from_parts(vec![segs.len(), c], out)
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    entries: Vec<(u64, ParamId, Tensor)>,
}

impl Gradients {
    fn push(&mut self, store: u64, id: ParamId, g: Tensor) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == store && e.1 == id) {
            e.2.add_assign(&g);
        } else {
            self.entries.push((store, id, g));
        }
    }

    /// Gradient for a parameter of `store`, or `None` if it was unreachable.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.0 == store.uid() && e.1 == id).map(|e| &e.2)
    }

    /// Add this pass's gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let uid = store.uid();
        for (s, id, g) in &self.entries {
            if *s == uid {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }

    /// Mutable access, e.g. for scaling the gradients of one store.
    pub fn scale_store(&mut self, store: &ParamStore, k: f64) {
        for (s, _, g) in &mut self.entries {
            if *s == store.uid() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}
