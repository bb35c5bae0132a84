//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op as a node holding its forward value. Leaves
//! are either trainable parameters or constants; a node needs a gradient iff
//! one of its inputs does. [`Tape::backward`] walks the nodes in reverse and
//! returns a [`Gradients`] table indexed by [`Var`].
//!
//! All ops work on rank-2 views (see [`Tensor`]). Scalars are `1 × 1`.

use std::ops::Range;

use crate::error::{NumError, Result};
use crate::params::ParamSet;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense(Var, Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatCols(Var, Var),
    CosineRows(Var, Var),
    Gather(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<Range<usize>>),
    SegmentWeightedSum(Var, Var, Vec<Range<usize>>),
    PairwiseDistance(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameters of one [`ParamSet`] placed on a tape, in set order.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_segments(segs: &[Range<usize>], rows: usize) -> Result<()> {
    if segs.iter().any(|s| s.start > s.end || s.end > rows) {
        return Err(NumError::BadSegments { rows });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node's value; intended for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies a node's value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Places every tensor of `params` on the tape, trainable or frozen.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            names.push(name.to_string());
            vars.push(self.push(t.clone(), Op::Leaf, trainable));
        }
        Bound { names, vars }
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = (xv.rows(), xv.cols());
        let (k2, m) = (wv.rows(), wv.cols());
        if k != k2 {
            return Err(mismatch("dense", xv, wv));
        }
        if bv.len() != m {
            return Err(mismatch("dense bias", wv, bv));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        matmul_into(xv.data(), wv.data(), &mut out, n, k, m);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(mat(n, m, out), Op::Dense(x, w, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(mismatch(op, av, bv));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let out = mat(av.rows(), av.cols(), av.zip_map(self.value(b), f).into_data());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let out = mat(av.rows(), av.cols(), av.map(f).into_data());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Scales row `i` of `a` (`n × m`) by `c[i]` (`c` is `n × 1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(mismatch("mul_col", av, cv));
        }
        let m = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv.data()[i / m])
            .collect();
        let out = mat(av.rows(), m, data);
        let ng = self.ng(a) || self.ng(c);
        Ok(self.push(out, Op::MulCol(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            softmax_row(av.row_slice(i), &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(mat(n, c, out), Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            log_softmax_row(av.row_slice(i), &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(mat(n, c, out), Op::LogSoftmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Row sums, `n × m → n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect();
        let out = Tensor::column(&data);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Column means, `n × m → 1 × m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut data = vec![0.0; m];
        for i in 0..n {
            for (d, &x) in data.iter_mut().zip(av.row_slice(i)) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= n as f64;
        }
        let ng = self.ng(a);
        self.push(mat(1, m, data), Op::MeanRows(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(mismatch("concat_cols", av, bv));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(av.row_slice(i));
            data.extend_from_slice(bv.row_slice(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(n, ca + cb, data), Op::ConcatCols(a, b), ng))
    }

    /// Row-wise cosine similarity, `n × m, n × m → n × 1`. A zero-norm row
    /// yields similarity 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = (0..av.rows())
            .map(|i| {
                let (x, y) = (av.row_slice(i), bv.row_slice(i));
                let (nx, ny) = (norm(x), norm(y));
                if nx == 0.0 || ny == 0.0 {
                    0.0
                } else {
                    x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
                }
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::column(&data), Op::CosineRows(a, b), ng))
    }

    /// Picks `a[i, idx[i]]` per row, giving `n × 1`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(NumError::ShapeMismatch {
                op: "gather",
                left: av.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= av.cols()) {
            return Err(NumError::IndexOutOfRange {
                index: bad,
                len: av.cols(),
            });
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| av.at(i, j)).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::column(&data), Op::Gather(a, idx.to_vec()), ng))
    }

    /// Softmax of an `N × 1` score column taken separately within each
    /// segment of rows.
    pub fn segment_softmax(&mut self, scores: Var, segs: &[Range<usize>]) -> Result<Var> {
        let sv = self.value(scores);
        if sv.cols() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "segment_softmax",
                left: sv.shape().to_vec(),
                right: vec![sv.rows(), 1],
            });
        }
        check_segments(segs, sv.rows())?;
        let mut out = vec![0.0; sv.rows()];
        for s in segs {
            if !s.is_empty() {
                softmax_row(&sv.data()[s.clone()], &mut out[s.clone()]);
            }
        }
        let ng = self.ng(scores);
        Ok(self.push(
            Tensor::column(&out),
            Op::SegmentSoftmax(scores, segs.to_vec()),
            ng,
        ))
    }

    /// For each segment `b`, `Σ_{j∈b} w_j · v_j`, giving `B × d`. Empty
    /// segments produce zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segs: &[Range<usize>],
    ) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.cols() != 1 || wv.rows() != vv.rows() {
            return Err(mismatch("segment_weighted_sum", wv, vv));
        }
        check_segments(segs, vv.rows())?;
        let d = vv.cols();
        let mut out = vec![0.0; segs.len() * d];
        for (b, s) in segs.iter().enumerate() {
            let orow = &mut out[b * d..(b + 1) * d];
            for j in s.clone() {
                let w = wv.data()[j];
                for (o, &x) in orow.iter_mut().zip(vv.row_slice(j)) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(weights) || self.ng(values);
        Ok(self.push(
            mat(segs.len().max(1), d, if segs.is_empty() { vec![0.0; d] } else { out }),
            Op::SegmentWeightedSum(weights, values, segs.to_vec()),
            ng,
        ))
    }

    /// Euclidean distances between all row pairs, `N × F → N × N`.
    pub fn pairwise_distance(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = av
                    .row_slice(i)
                    .iter()
                    .zip(av.row_slice(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let ng = self.ng(a);
        self.push(mat(n, n, out), Op::PairwiseDistance(a), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(NumError::NonFinite("backward"));
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let wrow = &wv.data()[p * m..(p + 1) * m];
                            dx[i * k + p] = gd[i * m..(i + 1) * m]
                                .iter()
                                .zip(wrow)
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap());
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; k * m];
                    matmul_into(&xv.transpose().into_data(), gd, &mut dw, k, n, m);
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (d, &x) in db.iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = g.matmul(&bv.transpose()).unwrap();
                    acc(*a, da.reshape(av.shape().to_vec()).unwrap());
                }
                if self.ng(*b) {
                    let db = av.transpose().matmul(g).unwrap();
                    acc(*b, db.reshape(bv.shape().to_vec()).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y));
                acc(*b, g.zip_map(av, |x, y| x * y));
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let m = av.cols();
                if self.ng(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * cv.data()[i / m])
                        .collect();
                    acc(*a, mat(av.rows(), m, da));
                }
                if self.ng(*c) {
                    let dc: Vec<f64> = (0..av.rows())
                        .map(|i| {
                            gd[i * m..(i + 1) * m]
                                .iter()
                                .zip(av.row_slice(i))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    acc(*c, Tensor::column(&dc));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |x, y| if y > 0.0 { x } else { slope * x }));
            }
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut da = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let gy = &gd[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(*a, mat(out.rows(), c, da));
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut da = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let ly = out.row_slice(i);
                    let gy = &gd[i * c..(i + 1) * c];
                    let total: f64 = gy.iter().sum();
                    for j in 0..c {
                        da[i * c + j] = gy[j] - ly[j].exp() * total;
                    }
                }
                acc(*a, mat(out.rows(), c, da));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::filled(av.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::filled(av.shape(), gd[0] / av.len() as f64));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let m = av.cols();
                let da = (0..av.len()).map(|i| gd[i / m]).collect();
                acc(*a, mat(av.rows(), m, da));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (n, m) = (av.rows(), av.cols());
                let da = (0..av.len()).map(|i| gd[i % m] / n as f64).collect();
                acc(*a, mat(n, m, da));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = out.rows();
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for i in 0..n {
                    let row = &gd[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, mat(n, ca, da));
                acc(*b, mat(n, cb, db));
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m) = (av.rows(), av.cols());
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; n * m];
                for i in 0..n {
                    let (x, y) = (av.row_slice(i), bv.row_slice(i));
                    let (nx, ny) = (norm(x), norm(y));
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let c = out.data()[i];
                    for j in 0..m {
                        da[i * m + j] = gd[i] * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        db[i * m + j] = gd[i] * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                acc(*a, mat(n, m, da));
                acc(*b, mat(n, m, db));
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut da = vec![0.0; av.len()];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * m + j] = gd[i];
                }
                acc(*a, mat(av.rows(), m, da));
            }
            Op::SegmentSoftmax(a, segs) => {
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for s in segs {
                    let dot: f64 = s.clone().map(|j| y[j] * gd[j]).sum();
                    for j in s.clone() {
                        da[j] = y[j] * (gd[j] - dot);
                    }
                }
                acc(*a, Tensor::column(&da));
            }
            Op::SegmentWeightedSum(w, v, segs) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let d = vv.cols();
                let mut dw = vec![0.0; wv.len()];
                let mut dv = vec![0.0; vv.len()];
                for (b, s) in segs.iter().enumerate() {
                    let gb = &gd[b * d..(b + 1) * d];
                    for j in s.clone() {
                        dw[j] = gb.iter().zip(vv.row_slice(j)).map(|(x, y)| x * y).sum();
                        for (t, &x) in dv[j * d..(j + 1) * d].iter_mut().zip(gb) {
                            *t = wv.data()[j] * x;
                        }
                    }
                }
                acc(*w, Tensor::column(&dw));
                acc(*v, mat(vv.rows(), d, dv));
            }
            Op::PairwiseDistance(a) => {
                let av = self.value(*a);
                let (n, f) = (av.rows(), av.cols());
                let mut da = vec![0.0; n * f];
                for i in 0..n {
                    for j in 0..n {
                        let dist = out.data()[i * n + j];
                        if i == j || dist == 0.0 {
                            continue;
                        }
                        let coef = (gd[i * n + j] + gd[j * n + i]) / dist;
                        let (xi, xj) = (av.row_slice(i), av.row_slice(j));
                        for k in 0..f {
                            da[i * f + k] += coef * (xi[k] - xj[k]);
                        }
                    }
                }
                acc(*a, mat(n, f, da));
            }
        }
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, `None` when `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone().reshape(tape.value(v).shape().to_vec()).unwrap(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    /// Gradients for a bound parameter set, in the set's order and names.
    pub fn for_bound(&self, tape: &Tape, bound: &Bound) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &v) in bound.names.iter().zip(&bound.vars) {
            out.push(name.clone(), self.wrt(tape, v))
                .expect("bound names are unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, 2.0]));
        let w = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::row(&[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let z = tape.constant(t(1, 2, &[0.0, 0.0]));
        let w2 = tape.constant(t(2, 2, &[5.0, -1.0, 2.0, 7.0]));
        let b2 = tape.constant(Tensor::row(&[3.0, 4.0]));
        let y2 = tape.dense(z, w2, b2).unwrap();
        assert_eq!(tape.value(y2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[1.0; 3]));
        let w = tape.constant(t(2, 2, &[1.0; 4]));
        let b = tape.constant(Tensor::row(&[0.0, 0.0]));
        let err = tape.dense(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 2, &[0.0, 0.0, 1000.0, 1000.0]));
        let s = tape.softmax(a);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(2, 2, &[0.3, -1.0, 2.0, 4.0]));
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(&tape, w).data(), &[1.0; 4]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.param(t(1, 2, &[0.3, -1.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let l = tape.sum(c);
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.wrt(&tape, w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t(1, 2, &[0.3, -1.0]));
        assert!(matches!(tape.backward(w), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(1, 2, &[0.3, -1.0]));
        let d = tape.detach(w);
        let p = tape.mul(w, d).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        // d/dw (w * const) = const
        assert_eq!(g.wrt(&tape, w).data(), &[0.3, -1.0]);
    }

    #[test]
    fn segment_weighted_sum_with_empty_segment() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::column(&[0.25, 0.75]));
        let v = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.segment_weighted_sum(w, v, &[0..2, 2..2]).unwrap();
        assert_eq!(tape.value(out).data(), &[2.5, 3.5, 0.0, 0.0]);
    }
}
