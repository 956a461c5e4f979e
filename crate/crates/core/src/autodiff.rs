//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! Parameters are referenced from a borrowed [`ParamStore`] instead of being
//! copied, so a tape is cheap to build per minibatch. [`Tape::backward`]
//! walks the tape in reverse, fills node gradients, and returns the
//! gradients of every parameter that was touched.
//!
//! Policy: a tape serves one backward pass. Calling `backward` again
//! discards previous node gradients and recomputes them.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Unfold {
        input: Var,
        segments: Vec<(usize, usize)>,
        kernel: usize,
    },
    SoftmaxRows {
        input: Var,
        exclude: Option<Vec<bool>>,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<CeTarget>,
    },
}

/// One term of a weighted cross-entropy sum: `weight * -ln p[row][class]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTarget {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    requires_grad: bool,
    op: Op,
}

/// Parameter gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}


impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
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

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self
                .params
                .expect("parameter node on a tape without a store")
                .value(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used for checks and tests).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(shape_err!("matmul of {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![c, r], out).expect("transpose shape"),
            Op::Transpose(a),
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// `x[r][c] + v[c]` for every row; `v` holds exactly `cols(x)` values.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(v).numel() != c {
            return Err(shape_err!(
                "row broadcast of {} values over {} columns",
                self.value(v).numel(),
                c
            ));
        }
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vd) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        debug_assert_eq!(out.len(), r * c);
        let rg = self.rg(&[x, v]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBroadcast(x, v), rg))
    }

    /// `x[r][c] * v[c]` for every row.
    pub fn mul_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, c) = self.dims2(x);
        if self.value(v).numel() != c {
            return Err(shape_err!(
                "row broadcast of {} values over {} columns",
                self.value(v).numel(),
                c
            ));
        }
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, s) in row.iter_mut().zip(vd) {
                *o *= s;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, v]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRowBroadcast(x, v), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        if self.shape(x) != k.shape() {
            return Err(shape_err!(
                "mul_const: {:?} vs {:?}",
                self.shape(x),
                k.shape()
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(k.data())
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(x, k), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Scale(x, s),
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Relu(x), rg)
    }

    /// Inverted dropout: in training mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Outside training, or with
    /// `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid!("dropout probability {p} outside [0, 1)"));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout(x, mask), rg))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid!("concat_cols of nothing"));
        };
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err!(
                    "concat_cols row mismatch: {} vs {}",
                    self.value(p).rows(),
                    rows
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid!("concat_rows of nothing"));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err!(
                    "concat_rows column mismatch: {} vs {}",
                    t.cols(),
                    cols
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if start + len > r {
            return Err(shape_err!("rows {start}..{} out of {r}", start + len));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows(x, start),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Output row `i` is row `indices[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(invalid!("row index {i} out of range for {r} rows"));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], out)?,
            Op::GatherRows(x, indices.to_vec()),
            rg,
        ))
    }

    /// Sliding-window unfolding for same-length 1D convolution.
    ///
    /// `x` packs several sequences row-wise; `segments` lists each sequence as
    /// `(start_row, length)`. Output row `i` concatenates the input rows
    /// `i-c ..= i+c` of the same sequence (`kernel = 2c+1`), with zero vectors
    /// where the window leaves the sequence.
    pub fn unfold(&mut self, x: Var, segments: &[(usize, usize)], kernel: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(invalid!("kernel size {kernel} must be odd"));
        }
        let (rows, d) = self.dims2(x);
        check_segments(segments, rows)?;
        let c = kernel / 2;
        let src = self.value(x).data();
        let width = kernel * d;
        let mut out = vec![0.0; rows * width];
        for &(start, len) in segments {
            for i in 0..len {
                let dst = &mut out[(start + i) * width..(start + i + 1) * width];
                for w in 0..kernel {
                    let j = i as isize + w as isize - c as isize;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    let src_row = start + j as usize;
                    dst[w * d..(w + 1) * d].copy_from_slice(&src[src_row * d..(src_row + 1) * d]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Unfold {
                input: x,
                segments: segments.to_vec(),
                kernel,
            },
            rg,
        ))
    }

    /// Row-wise softmax. Entries flagged in `exclude` (row-major, same size as
    /// `x`) get probability exactly zero and are left out of normalization.
    pub fn softmax_rows(&mut self, x: Var, exclude: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if let Some(ex) = &exclude {
            if ex.len() != r * c {
                return Err(shape_err!("exclusion mask of {} for {}x{}", ex.len(), r, c));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let ex = exclude.as_ref().map(|e| &e[i * c..(i + 1) * c]);
            softmax_into(&src[i * c..(i + 1) * c], ex, &mut out[i * c..(i + 1) * c])?;
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SoftmaxRows { input: x, exclude },
            rg,
        ))
    }

    /// Weighted sum of `-ln max(p[row][class], LOG_FLOOR)` over `targets`.
    pub fn cross_entropy(&mut self, probs: Var, targets: Vec<CeTarget>) -> Result<Var> {
        let (r, c) = self.dims2(probs);
        let p = self.value(probs);
        let mut total = 0.0;
        for t in &targets {
            if t.row >= r || t.class >= c {
                return Err(invalid!(
                    "target ({}, {}) outside {}x{} predictions",
                    t.row,
                    t.class,
                    r,
                    c
                ));
            }
            total += t.weight * -p.at(t.row, t.class).max(LOG_FLOOR).ln();
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { probs, targets },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::filled(&seed_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut param_grads = Gradients::default();
        if let Some(store) = self.params {
            param_grads.grads = (0..store.len()).map(|_| None).collect();
            for (idx, node) in self.nodes.iter().enumerate() {
                if let (Some(id), Some(g)) = (node.param, &grads[idx]) {
                    match &mut param_grads.grads[id.index()] {
                        Some(acc) => acc.add_assign(g),
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        self.grads = grads;
        Ok(param_grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate(grads, *a, |da| gemm(m, n, k, gd, false, bv, true, da, true));
                self.accumulate(grads, *b, |db| gemm(k, m, n, av, true, gd, false, db, true));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a);
                self.accumulate(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| add_into(d, gd));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRowBroadcast(x, v) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |d| add_into(d, gd));
                self.accumulate(grads, *v, |d| {
                    for row in gd.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRowBroadcast(x, v) => {
                let c = self.value(*x).cols();
                let xv = self.value(*x).data();
                let vv = self.value(*v).data();
                self.accumulate(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(gd.chunks(c)) {
                        for ((d, g), s) in drow.iter_mut().zip(grow).zip(vv) {
                            *d += g * s;
                        }
                    }
                });
                self.accumulate(grads, *v, |d| {
                    for (grow, xrow) in gd.chunks(c).zip(xv.chunks(c)) {
                        for ((d, g), x) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                });
            }
            Op::MulConst(x, k) => {
                self.accumulate(grads, *x, |d| {
                    for ((d, g), k) in d.iter_mut().zip(gd).zip(k.data()) {
                        *d += g * k;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |d| {
                    for (d, g) in d.iter_mut().zip(gd) {
                        *d += g * s;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                self.accumulate(grads, *x, |d| {
                    for ((d, g), m) in d.iter_mut().zip(gd).zip(mask) {
                        *d += g * m;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(gd.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |d| add_into(d, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.value(*x).cols();
                let off = start * c;
                self.accumulate(grads, *x, |d| add_into(&mut d[off..off + gd.len()], gd));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| add_into(d, gd));
            }
            Op::GatherRows(x, indices) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |d| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Unfold {
                input,
                segments,
                kernel,
            } => {
                let d_in = self.value(*input).cols();
                let width = kernel * d_in;
                let c = kernel / 2;
                self.accumulate(grads, *input, |d| {
                    for &(start, len) in segments {
                        for i in 0..len {
                            let grow = &gd[(start + i) * width..(start + i + 1) * width];
                            for w in 0..*kernel {
                                let j = i as isize + w as isize - c as isize;
                                if j < 0 || j >= len as isize {
                                    continue;
                                }
                                let r = start + j as usize;
                                add_into(&mut d[r * d_in..(r + 1) * d_in], &grow[w * d_in..(w + 1) * d_in]);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows { input, exclude } => {
                let y = self.nodes[idx].value.as_ref().expect("softmax output");
                let c = y.cols();
                let yd = y.data();
                self.accumulate(grads, *input, |d| {
                    for r in 0..y.rows() {
                        let yr = &yd[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            if exclude.as_ref().is_some_and(|e| e[r * c + j]) {
                                continue;
                            }
                            d[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let p = self.value(*probs);
                let c = p.cols();
                let g0 = gd[0];
                self.accumulate(grads, *probs, |d| {
                    for t in targets {
                        let pv = p.at(t.row, t.class);
                        if pv > LOG_FLOOR {
                            d[t.row * c + t.class] -= g0 * t.weight / pv;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_segments(segments: &[(usize, usize)], rows: usize) -> Result<()> {
    let mut next = 0;
    for &(start, len) in segments {
        if start < next || start + len > rows {
            return Err(shape_err!(
                "segment ({start}, {len}) overlaps or exceeds {rows} rows"
            ));
        }
        next = start + len;
    }
    Ok(())
}

fn softmax_into(logits: &[f64], exclude: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let included = |j: usize| exclude.is_none_or(|e| !e[j]);
    let max = (0..logits.len())
        .filter(|&j| included(j))
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(invalid!("softmax with every entry excluded"));
    }
    let mut z = 0.0;
    for j in 0..logits.len() {
        out[j] = if included(j) {
            let e = (logits[j] - max).exp();
            z += e;
            e
        } else {
            0.0
        };
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}

/// Softmax of a single vector with optional excluded indices (probability exactly 0).
pub fn softmax(logits: &[f64], exclude: &[usize]) -> Result<Vec<f64>> {
    if let Some(&bad) = exclude.iter().find(|&&i| i >= logits.len()) {
        return Err(invalid!("excluded index {bad} out of range"));
    }
    let mask: Vec<bool> = (0..logits.len()).map(|j| exclude.contains(&j)).collect();
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, Some(&mask), &mut out)?;
    Ok(out)
}

/// `-ln max(pred[gold], LOG_FLOOR)`.
pub fn cross_entropy(pred: &[f64], gold: usize) -> Result<f64> {
    let p = pred
        .get(gold)
        .ok_or_else(|| invalid!("gold class {gold} out of range for {} classes", pred.len()))?;
    Ok(-p.max(LOG_FLOOR).ln())
}
