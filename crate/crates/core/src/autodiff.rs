//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the indices of its inputs. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients of a scalar root. Graphs are built per loss
//! evaluation and thrown away afterwards.

use crate::tensor::{axpy, dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value-preserving copy that blocks gradient flow.
    StopGrad,
    /// `x · wᵀ`; x is B×in, w is out×in.
    MatMulT(Var, Var),
    /// Adds a 1×n row to every row of a B×n input.
    AddRow(Var, Var),
    /// Repeats a 1×n row `rows` times.
    BroadcastRows(Var),
    /// Multiplies each row of a B×n input by the matching entry of a B×1 column.
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxGroups(Var, usize),
    SumCols(Var),
    SumAll(Var),
    /// Forward value is a fixed one-hot sample plus `(p - p_const)`, which is
    /// exactly zero at evaluation time; the gradient is the identity into `p`.
    StraightThrough(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value)
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let v = self.value(x).matmul_t(self.value(w));
        self.push(v, Op::MatMulT(x, w))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a 1×n bias");
        assert_eq!(av.cols, rv.cols, "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Affine map `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_t(x, w);
        self.add_row(y, b)
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows, 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(rows * rv.cols);
        for _ in 0..rows {
            data.extend_from_slice(&rv.data);
        }
        let out = Mat::from_vec(rows, rv.cols, data);
        self.push(out, Op::BroadcastRows(row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols, 1, "mul_col expects a B×1 column");
        assert_eq!(av.rows, cv.rows, "mul_col row mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            let s = cv.data[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = self.value(a).zip_map(self.value(b), f);
        self.push(v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(v, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::hcat(&mats);
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Softmax applied independently to each contiguous group of columns.
    pub fn softmax_groups(&mut self, a: Var, groups: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols % groups, 0, "columns not divisible into groups");
        let c = av.cols / groups;
        let mut out = av.clone();
        for r in 0..out.rows {
            for chunk in out.row_mut(r).chunks_mut(c) {
                softmax_in_place(chunk);
            }
        }
        self.push(out, Op::SoftmaxGroups(a, groups))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let out = Mat::from_vec(av.rows, 1, data);
        self.push(out, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise dot product, B×n · B×n → B×1.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_cols(m)
    }

    /// Straight-through estimator: forward value is `onehot`, gradient flows
    /// into `probs` as if the output were the probabilities themselves.
    pub fn straight_through(&mut self, probs: Var, onehot: Mat, probs_const: &Mat) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), onehot.shape(), "straight-through shape mismatch");
        assert_eq!(pv.shape(), probs_const.shape(), "straight-through shape mismatch");
        let mut out = onehot;
        for ((o, p), pc) in out.data.iter_mut().zip(&pv.data).zip(&probs_const.data) {
            *o += p - pc;
        }
        self.push(out, Op::StraightThrough(probs))
    }

    /// Accumulates d(root)/d(node) for every node. `root` must be 1×1.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last backward root with respect to `v`; zeros when no
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Mat {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Mat::zeros(r, c)
            }
        }
    }

    fn accum(&mut self, v: Var, g: Mat) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&mut self, v: Var, f: impl FnOnce(&mut Mat)) {
        if self.grads[v.0].is_none() {
            let (r, c) = self.nodes[v.0].value.shape();
            self.grads[v.0] = Some(Mat::zeros(r, c));
        }
        f(self.grads[v.0].as_mut().unwrap());
    }

    fn propagate(&mut self, i: usize, g: &Mat) {
        // Borrow juggling: inputs always have lower indices than `i`.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMulT(x, w) => {
                let (x, w) = (*x, *w);
                let xv = &before[x.0].value;
                let wv = &before[w.0].value;
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                for b in 0..xv.rows {
                    let grow = g.row(b);
                    let xrow = xv.row(b);
                    let dxrow = &mut dx.data[b * xv.cols..(b + 1) * xv.cols];
                    for (o, &go) in grow.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        axpy(go, wv.row(o), dxrow);
                        axpy(go, xrow, &mut dw.data[o * wv.cols..(o + 1) * wv.cols]);
                    }
                }
                self.accum(x, dx);
                self.accum(w, dw);
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accum(a, g.clone());
                self.accum(row, dr);
            }
            Op::BroadcastRows(row) => {
                let row = *row;
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accum(row, dr);
            }
            Op::MulCol(a, col) => {
                let (a, col) = (*a, *col);
                let av = &before[a.0].value;
                let cv = &before[col.0].value;
                let mut da = g.clone();
                let mut dc = Mat::zeros(cv.rows, 1);
                for r in 0..g.rows {
                    let s = cv.data[r];
                    dc.data[r] = dot(g.row(r), av.row(r));
                    for v in da.row_mut(r) {
                        *v *= s;
                    }
                }
                self.accum(a, da);
                self.accum(col, dc);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.zip_map(&before[b.0].value, |gv, bv| gv * bv);
                let db = g.zip_map(&before[a.0].value, |gv, av| gv * av);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = &before[b.0].value;
                let da = g.zip_map(bv, |gv, bv| gv / bv);
                let tmp = g.zip_map(out, |gv, ov| gv * ov);
                let db = tmp.zip_map(bv, |t, bv| -t / bv);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Minimum(a, b) => {
                let (a, b) = (*a, *b);
                let av = &before[a.0].value;
                let bv = &before[b.0].value;
                let mut da = Mat::zeros(g.rows, g.cols);
                let mut db = Mat::zeros(g.rows, g.cols);
                for k in 0..g.data.len() {
                    if av.data[k] <= bv.data[k] {
                        da.data[k] = g.data[k];
                    } else {
                        db.data[k] = g.data[k];
                    }
                }
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                self.accum(a, g.map(|v| v * k));
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accum(a, g.clone());
            }
            Op::Tanh(a) => {
                let a = *a;
                let d = g.zip_map(out, |gv, y| gv * (1.0 - y * y));
                self.accum(a, d);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let d = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                self.accum(a, d);
            }
            Op::Elu(a) => {
                let a = *a;
                let d = g.zip_map(out, |gv, y| if y > 0.0 { gv } else { gv * (y + 1.0) });
                self.accum(a, d);
            }
            Op::Exp(a) => {
                let a = *a;
                let d = g.zip_map(out, |gv, y| gv * y);
                self.accum(a, d);
            }
            Op::Ln(a) => {
                let a = *a;
                let d = g.zip_map(&before[a.0].value, |gv, x| gv / x);
                self.accum(a, d);
            }
            Op::Square(a) => {
                let a = *a;
                let d = g.zip_map(&before[a.0].value, |gv, x| 2.0 * gv * x);
                self.accum(a, d);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let d = g.zip_map(out, |gv, y| gv * 0.5 / y);
                self.accum(a, d);
            }
            Op::ClampMin(a, lo) => {
                let (a, lo) = (*a, *lo);
                let d = g.zip_map(&before[a.0].value, |gv, x| if x > lo { gv } else { 0.0 });
                self.accum(a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let d = g.zip_map(&before[a.0].value, |gv, x| {
                    if x > lo && x < hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accum(a, d);
            }
            Op::Concat(parts) => {
                let widths: Vec<(Var, usize)> = parts.iter().map(|p| (*p, before[p.0].value.cols)).collect();
                let mut offset = 0;
                for (p, w) in widths {
                    let rows = g.rows;
                    self.accum_with(p, |dst| {
                        for r in 0..rows {
                            for (d, v) in dst.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *d += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let len = g.cols;
                self.accum_with(a, |dst| {
                    for r in 0..g.rows {
                        for (d, v) in dst.row_mut(r)[start..start + len].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                });
            }
            Op::SoftmaxGroups(a, groups) => {
                let (a, groups) = (*a, *groups);
                let c = out.cols / groups;
                let mut d = Mat::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    for k in 0..groups {
                        let s = r * out.cols + k * c;
                        let y = &out.data[s..s + c];
                        let gy = &g.data[s..s + c];
                        let inner = dot(y, gy);
                        for j in 0..c {
                            d.data[s + j] = y[j] * (gy[j] - inner);
                        }
                    }
                }
                self.accum(a, d);
            }
            Op::SumCols(a) => {
                let a = *a;
                let cols = before[a.0].value.cols;
                let mut d = Mat::zeros(g.rows, cols);
                for r in 0..g.rows {
                    let gv = g.data[r];
                    for v in d.row_mut(r) {
                        *v = gv;
                    }
                }
                self.accum(a, d);
            }
            Op::SumAll(a) => {
                let a = *a;
                let (r, c) = before[a.0].value.shape();
                self.accum(a, Mat::filled(r, c, g.data[0]));
            }
            Op::StraightThrough(p) => {
                let p = *p;
                self.accum(p, g.clone());
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let y = g.sum_all(y);
        g.backward(y);
        let analytic = g.grad(x);
        let eps = 1e-6;
        for k in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data[k] += eps;
            let mut minus = x0.clone();
            minus.data[k] -= eps;
            let eval = |m: Mat| {
                let mut g = Graph::new();
                let x = g.leaf(m);
                let y = build(&mut g, x);
                g.value(y).sum()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data[k];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "entry {k}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn sample() -> Mat {
        Mat::from_vec(2, 3, vec![0.3, -0.7, 1.2, 0.9, 0.1, -0.4])
    }

    #[test]
    fn elementwise_gradients() {
        fd_check(|g, x| g.tanh(x), sample());
        fd_check(|g, x| g.sigmoid(x), sample());
        fd_check(|g, x| g.elu(x), sample());
        fd_check(|g, x| g.exp(x), sample());
        fd_check(|g, x| { let e = g.exp(x); g.ln(e) }, sample());
        fd_check(|g, x| { let s = g.square(x); let s = g.add_scalar(s, 1.0); g.sqrt(s) }, sample());
    }

    #[test]
    fn softmax_and_products() {
        fd_check(
            |g, x| {
                let s = g.softmax_groups(x, 1);
                let w = g.constant(Mat::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
                g.mul(s, w)
            },
            sample(),
        );
        fd_check(
            |g, x| {
                let w = g.constant(Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
                let b = g.constant(Mat::row_vector(vec![0.1, -0.2, 0.3, 0.0]));
                let y = g.linear(x, w, b);
                g.tanh(y)
            },
            sample(),
        );
        fd_check(
            |g, x| {
                let d = g.dot_rows(x, x);
                let n = g.sqrt(d);
                let c = g.mul_col(x, n);
                let q = g.concat(&[c, x]);
                g.slice_cols(q, 2, 3)
            },
            sample(),
        );
    }

    #[test]
    fn weight_gradient_of_matmul() {
        let x = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.25, -0.3, 0.8]);
        fd_check(
            move |g, w| {
                let xv = g.constant(x.clone());
                g.matmul_t(xv, w)
            },
            sample(),
        );
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(sample());
        let s = g.stop_grad(x);
        let y = g.mul(x, s);
        let y = g.sum_all(y);
        g.backward(y);
        // d/dx (x * sg(x)) = sg(x)
        assert_eq!(g.grad(x), sample());
    }

    #[test]
    fn straight_through_value_is_exact_one_hot() {
        let mut g = Graph::new();
        let logits = g.leaf(Mat::from_vec(1, 3, vec![0.1, 0.7, -0.2]));
        let p = g.softmax_groups(logits, 1);
        let pc = g.value(p).clone();
        let onehot = Mat::from_vec(1, 3, vec![0.0, 1.0, 0.0]);
        let z = g.straight_through(p, onehot.clone(), &pc);
        assert_eq!(g.value(z), &onehot);
    }
}
