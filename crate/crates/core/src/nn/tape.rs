//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] records every primitive evaluated during a forward pass
//! together with its output. [`Tape::backward`] then walks the record in
//! reverse, accumulating adjoints, and returns one gradient array per
//! parameter of the borrowed [`ParamStore`]. The traversal order is fixed
//! by the recording order, so identical forward passes give bitwise
//! identical gradients.

use std::rc::Rc;

use super::array::{gemm, Array};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Offset added to the softplus-activated width of a predicted peak.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: usize,
        w: usize,
        offset: usize,
        width: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Silu {
        x: usize,
        sig: Vec<f64>,
    },
    Softplus(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: usize,
        index: Rc<[usize]>,
    },
    ScatterAdd {
        x: usize,
        index: Rc<[usize]>,
    },
    Sum(usize),
    PeakHead(usize),
    MseLoss {
        pred: usize,
        target: Array,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
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

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_vec(a.shape(), a.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_vec(a.shape(), data).expect("same shape")
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).value.clone();
        self.push(value, Op::Param(id), true)
    }

    /// `x W^T` for `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let width = self.value(w).cols();
        self.linear_block(x, w, 0, width)
    }

    /// `x W[:, offset..offset + width]^T`: the product with one column block
    /// of `W`, used to apply a weight matrix to a concatenated input without
    /// materializing the concatenation.
    pub fn linear_block(&mut self, x: Var, w: Var, offset: usize, width: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || offset + width > wv.cols() || xv.cols() != width {
            return Err(Error::Shape(format!(
                "linear: input {:?} against weight {:?} block {offset}..{}",
                xv.shape(),
                wv.shape(),
                offset + width
            )));
        }
        let (rows, out, total) = (xv.rows(), wv.shape()[0], wv.cols());
        let mut y = vec![0.0; rows * out];
        gemm(
            rows,
            width,
            out,
            xv.data(),
            (width as isize, 1),
            &wv.data()[offset..],
            (1, total as isize),
            0.0,
            &mut y,
            (out as isize, 1),
        );
        let needs = self.needs(x.0) || self.needs(w.0);
        Ok(self.push(
            Array::matrix(rows, out, y),
            Op::Linear {
                x: x.0,
                w: w.0,
                offset,
                width,
            },
            needs,
        ))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} columns",
                bv.len(),
                xv.cols()
            )));
        }
        let mut y = xv.clone();
        let c = y.cols();
        let bias = bv.data();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let needs = self.needs(x.0) || self.needs(b.0);
        Ok(self.push(y, Op::AddBias { x: x.0, b: b.0 }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = zip(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(y, Op::Add(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = zip(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(y, Op::Mul(a.0, b.0), needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let y = zip(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(y, Op::Div(a.0, b.0), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = map(self.value(a), |x| x * factor);
        let needs = self.needs(a.0);
        self.push(y, Op::Scale(a.0, factor), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let y = map(self.value(a), |x| x + c);
        let needs = self.needs(a.0);
        self.push(y, Op::AddScalar(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = map(self.value(a), sigmoid);
        let needs = self.needs(a.0);
        self.push(y, Op::Sigmoid(a.0), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let sig: Vec<f64> = xv.data().iter().map(|&x| sigmoid(x)).collect();
        let y = Array::from_vec(
            xv.shape(),
            xv.data().iter().zip(&sig).map(|(x, s)| x * s).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a.0);
        self.push(y, Op::Silu { x: a.0, sig }, needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = map(self.value(a), softplus);
        let needs = self.needs(a.0);
        self.push(y, Op::Softplus(a.0), needs)
    }

    /// Standardizes each row over its last dimension, then applies the
    /// affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape(format!("layer norm affine of width != {d}")));
        }
        if d < 2 {
            return Err(Error::Shape("layer norm needs at least 2 columns".into()));
        }
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let yr = &mut y[r * d..(r + 1) * d];
            for c in 0..d {
                xh[c] = (row[c] - mean) * inv;
                yr[c] = xh[c] * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            Array::from_vec(&shape, y)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Row gather: output row `r` is input row `index[r]`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut y = vec![0.0; index.len() * c];
        for (r, &i) in index.iter().enumerate() {
            if i >= n {
                return Err(Error::Shape(format!("gather index {i} >= {n} rows")));
            }
            y[r * c..(r + 1) * c].copy_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            Array::matrix(index.len(), c, y),
            Op::Gather { x: x.0, index },
            needs,
        ))
    }

    /// Row scatter-sum into `rows` output rows: output row `index[r]`
    /// accumulates input row `r`. Rows nobody targets stay zero.
    pub fn scatter_add(&mut self, x: Var, index: Rc<[usize]>, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != index.len() {
            return Err(Error::Shape(format!(
                "scatter of {} rows with {} indices",
                xv.rows(),
                index.len()
            )));
        }
        let c = xv.cols();
        let mut y = vec![0.0; rows * c];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(Error::Shape(format!("scatter index {i} >= {rows}")));
            }
            let src = &xv.data()[r * c..(r + 1) * c];
            for (o, s) in y[i * c..(i + 1) * c].iter_mut().zip(src) {
                *o += s;
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            Array::matrix(rows, c, y),
            Op::ScatterAdd { x: x.0, index },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a.0);
        self.push(Array::scalar(s), Op::Sum(a.0), needs)
    }

    /// Maps raw `[mu, s, a]` rows to `[mu, softplus(s) + 1e-3, softplus(a)]`.
    pub fn peak_head(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 3 {
            return Err(Error::Shape(format!("peak head needs 3 columns, got {}", xv.cols())));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_exact_mut(3) {
            row[1] = softplus(row[1]) + SIGMA_FLOOR;
            row[2] = softplus(row[2]);
        }
        let needs = self.needs(x.0);
        Ok(self.push(y, Op::PeakHead(x.0), needs))
    }

    /// Mean over all entries of `(pred - target)^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Array) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        if pv.is_empty() {
            return Err(Error::Empty("mse over zero values".into()));
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(pred.0);
        Ok(self.push(
            Array::scalar(loss),
            Op::MseLoss {
                pred: pred.0,
                target,
            },
            needs,
        ))
    }

    /// Propagates `d loss / d value` back through the record and returns the
    /// gradient of every parameter in the store (zeros for unused ones).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss.0) {
            return Err(Error::Backward(
                "loss is disconnected from every parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::filled(self.value(loss).shape(), 1.0));
        let mut out: Vec<Array> = self
            .store
            .iter()
            .map(|p| Array::zeros(p.value.shape()))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (o, v) in out[id.0].data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                &Op::Linear {
                    x,
                    w,
                    offset,
                    width,
                } => {
                    let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
                    let (rows, out_dim, total) = (xv.rows(), wv.shape()[0], wv.cols());
                    if self.needs(x) {
                        let dx = self.grad_buf(&mut grads, x);
                        gemm(
                            rows,
                            out_dim,
                            width,
                            g.data(),
                            (out_dim as isize, 1),
                            &wv.data()[offset..],
                            (total as isize, 1),
                            1.0,
                            dx.data_mut(),
                            (width as isize, 1),
                        );
                    }
                    if self.needs(w) {
                        let dw = self.grad_buf(&mut grads, w);
                        gemm(
                            out_dim,
                            rows,
                            width,
                            g.data(),
                            (1, out_dim as isize),
                            xv.data(),
                            (width as isize, 1),
                            1.0,
                            &mut dw.data_mut()[offset..],
                            (total as isize, 1),
                        );
                    }
                }
                &Op::AddBias { x, b } => {
                    if self.needs(b) {
                        let db = self.grad_buf(&mut grads, b);
                        let c = db.len();
                        for row in g.data().chunks_exact(c) {
                            for (o, v) in db.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    self.accumulate(&mut grads, x, g);
                }
                &Op::Add(a, b) => {
                    if self.needs(a) && self.needs(b) {
                        self.accumulate_ref(&mut grads, a, &g);
                    } else if self.needs(a) {
                        self.accumulate(&mut grads, a, g);
                        continue;
                    }
                    self.accumulate(&mut grads, b, g);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let gd = g.data();
                    self.accumulate_iter(&mut grads, a, gd.iter().zip(bv.data()).map(|(g, y)| g * y));
                    self.accumulate_iter(&mut grads, b, gd.iter().zip(av.data()).map(|(g, x)| g * x));
                }
                &Op::Div(a, b) => {
                    let bv = &self.nodes[b].value;
                    let gd = g.data();
                    self.accumulate_iter(&mut grads, a, gd.iter().zip(bv.data()).map(|(g, y)| g / y));
                    let quotient = gd.iter().zip(node.value.data()).zip(bv.data());
                    self.accumulate_iter(&mut grads, b, quotient.map(|((g, q), d)| -g * q / d));
                }
                &Op::Scale(a, f) => {
                    self.accumulate_iter(&mut grads, a, g.data().iter().map(|g| g * f));
                }
                &Op::AddScalar(a) => self.accumulate(&mut grads, a, g),
                &Op::Sigmoid(a) => {
                    let dy = g.data().iter().zip(node.value.data());
                    self.accumulate_iter(&mut grads, a, dy.map(|(g, y)| g * y * (1.0 - y)));
                }
                Op::Silu { x: a, sig } => {
                    let a = *a;
                    let dy = g.data().iter().zip(self.nodes[a].value.data()).zip(sig);
                    self.accumulate_iter(&mut grads, a, dy.map(|((g, x), s)| g * s * (1.0 + x * (1.0 - s))));
                }
                &Op::Softplus(a) => {
                    let dy = g.data().iter().zip(self.nodes[a].value.data());
                    self.accumulate_iter(&mut grads, a, dy.map(|(g, &x)| g * sigmoid(x)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let d = g.cols();
                    if self.needs(beta) {
                        let db = self.grad_buf(&mut grads, beta);
                        for row in g.data().chunks_exact(d) {
                            for (o, v) in db.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    if self.needs(gamma) {
                        let dg = self.grad_buf(&mut grads, gamma);
                        for (row, xh) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((o, v), h) in dg.data_mut().iter_mut().zip(row).zip(xh) {
                                *o += v * h;
                            }
                        }
                    }
                    if self.needs(x) {
                        let gam = self.nodes[gamma].value.data();
                        let dx = self.grad_buf(&mut grads, x);
                        let mut dxhat = vec![0.0; d];
                        for (r, ((row, xh), dxr)) in g
                            .data()
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(dx.data_mut().chunks_exact_mut(d))
                            .enumerate()
                        {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..d {
                                dxhat[c] = row[c] * gam[c];
                                mean_d += dxhat[c];
                                mean_dx += dxhat[c] * xh[c];
                            }
                            mean_d /= d as f64;
                            mean_dx /= d as f64;
                            let inv = inv_std[r];
                            for c in 0..d {
                                dxr[c] += inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Gather { x, index } => {
                    let x = *x;
                    let dx = self.grad_buf(&mut grads, x);
                    let c = dx.cols();
                    for (r, &i) in index.iter().enumerate() {
                        let src = &g.data()[r * c..(r + 1) * c];
                        for (o, v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Op::ScatterAdd { x, index } => {
                    let x = *x;
                    let dx = self.grad_buf(&mut grads, x);
                    let c = dx.cols();
                    for (r, &i) in index.iter().enumerate() {
                        let src = &g.data()[i * c..(i + 1) * c];
                        for (o, v) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                &Op::Sum(a) => {
                    let gv = g.item();
                    let da = self.grad_buf(&mut grads, a);
                    for o in da.data_mut() {
                        *o += gv;
                    }
                }
                &Op::PeakHead(a) => {
                    let xv = &self.nodes[a].value;
                    let da = self.grad_buf(&mut grads, a);
                    for ((o, gv), xr) in da
                        .data_mut()
                        .chunks_exact_mut(3)
                        .zip(g.data().chunks_exact(3))
                        .zip(xv.data().chunks_exact(3))
                    {
                        o[0] += gv[0];
                        o[1] += gv[1] * sigmoid(xr[1]);
                        o[2] += gv[2] * sigmoid(xr[2]);
                    }
                }
                Op::MseLoss { pred, target } => {
                    let pred = *pred;
                    let pv = &self.nodes[pred].value;
                    let scale = 2.0 * g.item() / pv.len() as f64;
                    let diff = pv.data().iter().zip(target.data());
                    self.accumulate_iter(&mut grads, pred, diff.map(|(p, t)| scale * (p - t)));
                }
            }
        }
        Ok(Gradients(out))
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Array>], idx: usize) -> &'g mut Array {
        grads[idx].get_or_insert_with(|| Array::zeros(self.nodes[idx].value.shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Array>], idx: usize, g: Array) {
        if !self.needs(idx) {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (o, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds elementwise values into the gradient of `idx`, taking them as
    /// the buffer itself when none exists yet.
    fn accumulate_iter(&self, grads: &mut [Option<Array>], idx: usize, g: impl Iterator<Item = f64>) {
        if !self.needs(idx) {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (o, v) in existing.data_mut().iter_mut().zip(g) {
                    *o += v;
                }
            }
            slot @ None => {
                let shape = self.nodes[idx].value.shape();
                *slot = Some(Array::from_vec(shape, g.collect()).expect("same shape"));
            }
        }
    }

    fn accumulate_ref(&self, grads: &mut [Option<Array>], idx: usize, g: &Array) {
        if !self.needs(idx) {
            return;
        }
        let buf = self.grad_buf(grads, idx);
        for (o, v) in buf.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
    }
}
