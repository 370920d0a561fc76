//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its forward value, so node order is
//! a topological order and the backward pass is a single reverse sweep.

use super::kernels::{self, reduce_to};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Rope { x: Var, positions: Vec<usize>, head_dim: usize, theta: f64 },
    MaskedSoftmax { x: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    InterleaveRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    TileCols { x: Var, reps: usize },
    RowDot(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; with `b` an `[out, in]` weight this is a bias-free linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = kernels::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::silu);
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let v = kernels::rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(v, Op::RmsNorm { x, gain, eps }))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, theta: f64) -> Result<Var> {
        let v = kernels::rope_rows(self.value(x), positions, head_dim, theta)?;
        Ok(self.push(
            v,
            Op::Rope { x, positions: positions.to_vec(), head_dim, theta },
        ))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let v = kernels::masked_softmax(self.value(x), &mask)?;
        Ok(self.push(v, Op::MaskedSoftmax { x }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        self.masked_softmax(x, vec![true; c])
    }

    /// Rows `ids` of a `[rows, cols]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Lookup(format!("row {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let v = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(v, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Stacks `n` equally shaped `[s, c]` inputs into `[s·n, c]` with row
    /// `j·n + i` taken from row `j` of input `i`.
    pub fn interleave_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        let (s, c) = self.value(xs[0]).dims2()?;
        for &x in xs {
            if self.value(x).shape() != first.as_slice() {
                return Err(Error::Dimension("interleave_rows inputs differ in shape".into()));
            }
        }
        let n = xs.len();
        let mut data = Vec::with_capacity(s * n * c);
        for j in 0..s {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(j));
            }
        }
        let v = Tensor::matrix(s * n, c, data)?;
        Ok(self.push(v, Op::InterleaveRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (rows, _) = self.value(xs[0]).dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).dims2()?;
            if r != rows {
                return Err(Error::Dimension("concat_cols inputs differ in row count".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(v, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let v = Tensor::matrix(rows, len, data)?;
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    /// Repeats the columns of `[r, n]` `reps` times into `[r, reps·n]`.
    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let (rows, n) = self.value(x).dims2()?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * n * reps);
        for r in 0..rows {
            for _ in 0..reps {
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let v = Tensor::matrix(rows, n * reps, data)?;
        Ok(self.push(v, Op::TileCols { x, reps }))
    }

    /// Row-wise dot product of two `[r, c]` inputs, giving `[r, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "row_dot shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (rows, _) = ta.dims2()?;
        let data = (0..rows).map(|r| kernels::dot(ta.row_slice(r), tb.row_slice(r))).collect();
        let v = Tensor::matrix(rows, 1, data)?;
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (rows, vocab) = l.dims2()?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Lookup(format!("target {t} out of range for {vocab} classes")));
            }
            total += nll(l.row_slice(r), t);
        }
        let v = Tensor::scalar(total / rows as f64);
        Ok(self.push(v, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Clears the record so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    ///
    /// A tape supports one backward sweep; call [`Tape::reset`] before recording
    /// the next graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            grads[i] = Some(g);
            for (target, contrib) in contributions {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, kernels::matmul_nt(g, val(*b))?),
                (*b, kernels::matmul_tn(val(*a), g)?),
            ],
            Op::MatMulNt(a, b) => vec![
                (*a, kernels::matmul(g, val(*b))?),
                (*b, kernels::matmul_tn(g, val(*a))?),
            ],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(g, val(*b).shape())),
            ],
            Op::Mul(a, b) => vec![
                (*a, reduce_to(&kernels::mul(g, val(*b))?, val(*a).shape())),
                (*b, reduce_to(&kernels::mul(g, val(*a))?, val(*b).shape())),
            ],
            Op::Scale(a, c) => vec![(*a, kernels::scale(g, *c))],
            Op::Silu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Sigmoid(a) => {
                let data = out.data().iter().zip(g.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                vec![(*a, Tensor::new(out.shape().to_vec(), data)?)]
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, gv) = (val(*x), val(*gain));
                let c = xv.last_dim();
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggain = Tensor::zeros(gv.shape());
                for r in 0..xv.outer_len() {
                    let xr = xv.row_slice(r);
                    let gr = g.row_slice(r);
                    let inv = kernels::inv_rms(xr, *eps);
                    let mut proj = 0.0;
                    for j in 0..c {
                        let xhat = xr[j] * inv;
                        ggain.data_mut()[j] += gr[j] * xhat;
                        proj += gr[j] * gv.data()[j] * xhat;
                    }
                    proj /= c as f64;
                    let row = gx.row_slice_mut(r);
                    for j in 0..c {
                        row[j] = (gr[j] * gv.data()[j] - xr[j] * inv * proj) * inv;
                    }
                }
                vec![(*x, gx), (*gain, ggain)]
            }
            Op::Rope { x, positions, head_dim, theta } => {
                let mut gx = g.clone();
                for (r, &p) in positions.iter().enumerate() {
                    kernels::rope_in_place(gx.row_slice_mut(r), p, *head_dim, *theta, true);
                }
                vec![(*x, gx)]
            }
            Op::MaskedSoftmax { x } => {
                let mut gx = Tensor::zeros(out.shape());
                for r in 0..out.outer_len() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner = kernels::dot(y, gr);
                    for ((o, &yv), &gv) in gx.row_slice_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { table, ids } => {
                let mut gt = Tensor::zeros(val(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                vec![(*table, gt)]
            }
            Op::InterleaveRows(xs) => {
                let n = xs.len();
                let shape = val(xs[0]).shape().to_vec();
                let mut parts: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(&shape)).collect();
                for row in 0..out.outer_len() {
                    let (j, k) = (row / n, row % n);
                    parts[k].row_slice_mut(j).copy_from_slice(g.row_slice(row));
                }
                xs.iter().copied().zip(parts).collect()
            }
            Op::ConcatCols(xs) => {
                let mut res = Vec::with_capacity(xs.len());
                let mut start = 0;
                for &x in xs {
                    let (rows, c) = val(x).dims2()?;
                    let mut part = Tensor::zeros(&[rows, c]);
                    for r in 0..rows {
                        part.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[start..start + c]);
                    }
                    start += c;
                    res.push((x, part));
                }
                res
            }
            Op::SliceCols { x, start, len } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for r in 0..out.outer_len() {
                    gx.row_slice_mut(r)[*start..start + len].copy_from_slice(g.row_slice(r));
                }
                vec![(*x, gx)]
            }
            Op::TileCols { x, reps } => {
                let (rows, n) = val(*x).dims2()?;
                let mut gx = Tensor::zeros(&[rows, n]);
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    let row = gx.row_slice_mut(r);
                    for rep in 0..*reps {
                        for c in 0..n {
                            row[c] += gr[rep * n + c];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for r in 0..ta.outer_len() {
                    let gr = g.data()[r];
                    for (o, &v) in ga.row_slice_mut(r).iter_mut().zip(tb.row_slice(r)) {
                        *o = gr * v;
                    }
                    for (o, &v) in gb.row_slice_mut(r).iter_mut().zip(ta.row_slice(r)) {
                        *o = gr * v;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::CrossEntropy { logits, targets } => {
                let l = val(*logits);
                let scale = g.data()[0] / targets.len() as f64;
                let mut gl = Tensor::zeros(l.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let p = kernels::softmax_slice(l.row_slice(r));
                    let row = gl.row_slice_mut(r);
                    for (o, pv) in row.iter_mut().zip(p) {
                        *o = pv * scale;
                    }
                    row[t] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        })
    }
}

/// Negative log-softmax of `logits` at `target`.
pub fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}
