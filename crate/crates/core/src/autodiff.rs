//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is a topological order by construction. [`Tape::backward`] walks the
//! tape once in reverse and adds parameter gradients into the
//! [`ParamStore`]; accumulators are never overwritten, so call
//! [`ParamStore::zero_grad`] between steps.

use crate::error::{Error, Result};
use crate::norm::{self, AffineParams, NormCache, NormConfig, RunningStats};
use crate::tensor::{cast, gemm_into, Mat, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S: Scalar = f64> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(S::zero());
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f64> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total number of scalar parameter values.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Squared l2 norm of all gradients, accumulated in f64.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    /// A leaf that never receives a gradient.
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeometry,
        cols: Tensor<S>,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        cfg: NormConfig,
        cache: Box<NormCache<S>>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<S>,
        labels: Vec<usize>,
    },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Square(Var),
    /// Sum of `x * weights` with constant weights.
    WeightedSum {
        x: Var,
        weights: Tensor<S>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

/// Gradients of the leaf nodes after a backward pass. Intermediate
/// gradients are consumed during the sweep.
#[derive(Debug)]
pub struct Grads<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf excluded from differentiation. Operations skip computing
    /// gradients that would only flow into constants.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant)
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }

    /// A leaf bound to a parameter; its gradient flows into the store.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    /// `x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(shape_err(wv.shape(), xv.shape()));
        }
        let (n, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if bv.shape() != [fout] {
            return Err(shape_err(&[fout], bv.shape()));
        }
        let mut out = vec![S::zero(); n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bv.data());
        }
        gemm_into(
            Mat::row_major(xv.data(), n, fin),
            Mat::row_major(wv.data(), fout, fin).t(),
            &mut out,
            S::one(),
        );
        let value = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [OC, C, KH, KW]`, `b: [OC]`,
    /// zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(shape_err(wv.shape(), xv.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [oc, _, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if bv.shape() != [oc] {
            return Err(shape_err(&[oc], bv.shape()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = Conv2dGeometry { stride, pad };
        // cols: [C*KH*KW, N*P]
        let cols = im2col(xv, kh, kw, geom, oh, ow);
        let ckk = c * kh * kw;
        let p = oh * ow;
        let np = n * p;
        let mut y = vec![S::zero(); oc * np];
        gemm_into(
            Mat::row_major(wv.data(), oc, ckk),
            Mat::row_major(cols.data(), ckk, np),
            &mut y,
            S::zero(),
        );
        let mut out = Vec::with_capacity(n * oc * p);
        for s in 0..n {
            for (o, &bias) in bv.data().iter().enumerate() {
                out.extend(y[o * np + s * p..][..p].iter().map(|&v| v + bias));
            }
        }
        let value = Tensor::new(vec![n, oc, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < S::zero() { S::zero() } else { v });
        self.push(value, Op::Relu(x))
    }

    /// Max pooling with a `k x k` window. Ties go to the lowest flat index.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || k == 0 || stride == 0 || xv.shape()[2] < k || xv.shape()[3] < k {
            return Err(Error::invalid(format!(
                "max_pool2d({k}, {stride}) on shape {:?}",
                xv.shape()
            )));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        if k == 2 && stride == 2 {
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..oh {
                    let top = base + 2 * i * w;
                    for j in 0..ow {
                        let a = top + 2 * j;
                        let mut best = a;
                        for idx in [a + 1, a + w, a + w + 1] {
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        argmax.push(best);
                        out.push(xd[best]);
                    }
                }
            }
            let value = Tensor::new(vec![n, c, oh, ow], out)?;
            return Ok(self.push(value, Op::MaxPool2d { x, argmax }));
        }
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(xd[best]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 1 {
            return Err(Error::invalid("flatten needs a batch axis"));
        }
        let n = xv.shape()[0];
        let value = xv.clone().reshape(&[n, xv.len() / n])?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Normalization layer in training mode (batch statistics). Batch kinds
    /// fold their moments into `stats` when it is given.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        cfg: &NormConfig,
        stats: Option<&mut RunningStats<S>>,
    ) -> Result<Var> {
        let affine = AffineParams {
            gamma: self.value(gamma).clone(),
            beta: self.value(beta).clone(),
        };
        let (y, cache) = norm::forward_train(self.value(x), &affine, cfg, stats)?;
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                cfg: *cfg,
                cache: Box::new(cache),
            },
        ))
    }

    /// The cache saved by a normalization node.
    pub fn norm_cache(&self, v: Var) -> Option<&NormCache<S>> {
        match &self.nodes[v.0].op {
            Op::Norm { cache, .. } => Some(cache),
            _ => None,
        }
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(shape_err(&[labels.len(), 0], lv.shape()));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside {k} classes")));
        }
        let mut probs = vec![S::zero(); n * k];
        let mut total = S::zero();
        for (r, (row, &label)) in lv.data().chunks(k).zip(labels).enumerate() {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut z = S::zero();
            for &v in row {
                z += (v - max).exp();
            }
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / cast(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs: Tensor::new(vec![n, k], probs)?,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        self.push(value, Op::Sum(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(av.shape(), bv.shape()));
        }
        let value = av.add(bv)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(av.shape(), bv.shape()));
        }
        let value = av.mul(bv)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).square();
        self.push(value, Op::Square(x))
    }

    /// `sum(x * weights)` for a constant `weights` tensor of x's shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err(xv.shape(), weights.shape()));
        }
        let mut acc = S::zero();
        for (a, b) in xv.data().iter().zip(weights.data()) {
            acc += *a * *b;
        }
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { x, weights }))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `store` and returning the gradient of every node.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Grads<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![S::one()])?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::Constant => {}
                Op::Param(pid) => {
                    let p = store.get_mut(*pid);
                    if p.trainable {
                        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    grads[id] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    if self.wants_grad(*x) {
                        let mut dx = vec![S::zero(); n * fin];
                        gemm_into(
                            Mat::row_major(g.data(), n, fout),
                            Mat::row_major(wv.data(), fout, fin),
                            &mut dx,
                            S::zero(),
                        );
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                    let mut dw = vec![S::zero(); fout * fin];
                    gemm_into(
                        Mat::row_major(g.data(), n, fout).t(),
                        Mat::row_major(xv.data(), n, fin),
                        &mut dw,
                        S::zero(),
                    );
                    let mut db = vec![S::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(&mut grads[b.0], Tensor::vector(&db));
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let [n, oc, oh, ow] = [g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]];
                    let p = oh * ow;
                    let ckk = wv.len() / oc;
                    let np = n * p;
                    // [N, OC, P] -> [OC, N*P]
                    let mut dout = vec![S::zero(); oc * np];
                    let mut db = vec![S::zero(); oc];
                    for (k, row) in g.data().chunks(p).enumerate() {
                        let (s, o) = (k / oc, k % oc);
                        dout[o * np + s * p..][..p].copy_from_slice(row);
                        let mut acc = S::zero();
                        for &v in row {
                            acc += v;
                        }
                        db[o] += acc;
                    }
                    let mut dw = vec![S::zero(); oc * ckk];
                    gemm_into(
                        Mat::row_major(&dout, oc, np),
                        Mat::row_major(cols.data(), ckk, np).t(),
                        &mut dw,
                        S::zero(),
                    );
                    if self.wants_grad(*x) {
                        let mut dcols = vec![S::zero(); ckk * np];
                        gemm_into(
                            Mat::row_major(wv.data(), oc, ckk).t(),
                            Mat::row_major(&dout, oc, np),
                            &mut dcols,
                            S::zero(),
                        );
                        let dx = col2im(&dcols, xv.shape(), wv.shape()[2], wv.shape()[3], *geom, oh, ow);
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(&mut grads[b.0], Tensor::vector(&db));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaxPool2d { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    let dd = dx.data_mut();
                    for (&src, &v) in argmax.iter().zip(g.data()) {
                        dd[src] += v;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], g.reshape(&shape)?);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    cfg,
                    cache,
                } => {
                    let affine = AffineParams {
                        gamma: self.value(*gamma).clone(),
                        beta: self.value(*beta).clone(),
                    };
                    let ng = norm::norm_backward(&g, cache, &affine, cfg)?;
                    accumulate(&mut grads[x.0], ng.dx);
                    accumulate(&mut grads[gamma.0], ng.dgamma);
                    accumulate(&mut grads[beta.0], ng.dbeta);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let k = probs.shape()[1];
                    let scale = g.item()? / cast(labels.len() as f64);
                    let mut d = probs.clone();
                    for (row, &label) in d.data_mut().chunks_mut(k).zip(labels) {
                        row[label] -= S::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::full(&shape, g.item()?));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Square(x) => {
                    let two: S = cast(2.0);
                    let dx = g.zip_with(self.value(*x), |d, v| two * v * d)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::WeightedSum { x, weights } => {
                    accumulate(&mut grads[x.0], weights.scale(g.item()?));
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Unfolds `x` into a `[C*KH*KW, N*OH*OW]` matrix.
fn im2col<S: Scalar>(x: &Tensor<S>, kh: usize, kw: usize, geom: Conv2dGeometry, oh: usize, ow: usize) -> Tensor<S> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let p = oh * ow;
    let np = n * p;
    let xd = x.data();
    if geom.stride == 1 && geom.pad == 0 {
        let mut cols = Vec::with_capacity(c * kh * kw * np);
        for r in 0..c * kh * kw {
            let (ch, di, dj) = (r / (kh * kw), r / kw % kh, r % kw);
            for s in 0..n {
                let plane = &xd[(s * c + ch) * h * w..][..h * w];
                for i in 0..oh {
                    let start = (i + di) * w + dj;
                    cols.extend_from_slice(&plane[start..start + ow]);
                }
            }
        }
        return Tensor::new(vec![c * kh * kw, np], cols).expect("im2col shape");
    }
    let mut cols = vec![S::zero(); c * kh * kw * np];
    for (r, row) in cols.chunks_mut(np).enumerate() {
        let (ch, di, dj) = (r / (kh * kw), r / kw % kh, r % kw);
        for s in 0..n {
            let plane = &xd[(s * c + ch) * h * w..][..h * w];
            for i in 0..oh {
                let Some(y) = tap(i, di, geom, h) else { continue };
                let src = &plane[y * w..][..w];
                let dst = &mut row[s * p + i * ow..][..ow];
                for (j, d) in dst.iter_mut().enumerate() {
                    if let Some(xx) = tap(j, dj, geom, w) {
                        *d = src[xx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * kh * kw, np], cols).expect("im2col shape")
}

/// Input coordinate read by output position `o` at kernel offset `k`.
fn tap(o: usize, k: usize, geom: Conv2dGeometry, extent: usize) -> Option<usize> {
    (o * geom.stride + k)
        .checked_sub(geom.pad)
        .filter(|&v| v < extent)
}

/// Adjoint of [`im2col`].
fn col2im<S: Scalar>(
    dcols: &[S],
    x_shape: &[usize],
    kh: usize,
    kw: usize,
    geom: Conv2dGeometry,
    oh: usize,
    ow: usize,
) -> Tensor<S> {
    let [n, c, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
    let p = oh * ow;
    let np = n * p;
    let mut dx = Tensor::<S>::zeros(x_shape);
    let dd = dx.data_mut();
    for (r, row) in dcols.chunks(np).enumerate() {
        let (ch, di, dj) = (r / (kh * kw), r / kw % kh, r % kw);
        for s in 0..n {
            let base = (s * c + ch) * h * w;
            for i in 0..oh {
                let Some(y) = tap(i, di, geom, h) else { continue };
                let dst = &mut dd[base + y * w..][..w];
                let src = &row[s * p + i * ow..][..ow];
                if geom.stride == 1 && geom.pad == 0 {
                    for (d, &v) in dst[dj..dj + ow].iter_mut().zip(src) {
                        *d += v;
                    }
                    continue;
                }
                for (j, &v) in src.iter().enumerate() {
                    if let Some(xx) = tap(j, dj, geom, w) {
                        dst[xx] += v;
                    }
                }
            }
        }
    }
    dx
}

/// Options for [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so that gradients
    /// near zero are compared on an absolute scale.
    pub denominator_floor: f64,
    /// Flat indices to check; `None` checks every element.
    pub indices: Option<Vec<usize>>,
    /// Flat indices sitting on a non-differentiable point; reported, not checked.
    pub excluded: Vec<usize>,
    /// Per-element steps indexed like `x`; overrides `step`.
    pub steps: Option<Vec<f64>>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            denominator_floor: 1e-3,
            indices: None,
            excluded: Vec::new(),
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub excluded: Vec<usize>,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn finite_difference_check(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    opts: &FdOptions,
) -> FdReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let all: Vec<usize>;
    let indices = match &opts.indices {
        Some(ix) => ix.as_slice(),
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    let (mut worst, mut worst_index) = (0.0f64, None);
    for &i in indices {
        if opts.excluded.contains(&i) {
            excluded.push(i);
            continue;
        }
        let h = opts.steps.as_ref().map_or(opts.step, |s| s[i]);
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(opts.denominator_floor);
        let rel_error = (a - numeric).abs() / denom;
        if rel_error > worst || worst_index.is_none() {
            worst = worst.max(rel_error);
            worst_index = Some(i);
        }
        entries.push(FdEntry {
            index: i,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    FdReport {
        entries,
        excluded,
        max_rel_error: worst,
        worst_index,
        tolerance: opts.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let nan = t.input(Tensor::vector(&[f64::NAN]));
        let r = t.relu(nan);
        assert!(t.value(r).data()[0].is_nan());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::full(&[3, 7], 0.3));
        let l = t.softmax_cross_entropy(x, &[0, 3, 6]).unwrap();
        assert!((t.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn conv_of_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::ones(&[1, 1, 3, 3]));
        let w = t.input(Tensor::ones(&[1, 1, 2, 2]));
        let b = t.input(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rand_tensor(&mut rng, &[2, 3, 6, 5]);
        let wv = rand_tensor(&mut rng, &[4, 3, 3, 2]);
        let bv = rand_tensor(&mut rng, &[4]);
        for (stride, pad) in [(1, 0), (2, 1), (1, 2)] {
            let mut t = Tape::<f64>::new();
            let (x, w, b) = (t.input(xv.clone()), t.input(wv.clone()), t.input(bv.clone()));
            let y = t.conv2d(x, w, b, stride, pad).unwrap();
            let out = t.value(y);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            for n in 0..2 {
                for o in 0..4 {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = bv.data()[o];
                            for c in 0..3 {
                                for di in 0..3 {
                                    for dj in 0..2 {
                                        let yy = (i * stride + di) as isize - pad as isize;
                                        let xx = (j * stride + dj) as isize - pad as isize;
                                        if yy < 0 || xx < 0 || yy >= 6 || xx >= 5 {
                                            continue;
                                        }
                                        acc += xv.get(&[n, c, yy as usize, xx as usize]).unwrap()
                                            * wv.get(&[o, c, di, dj]).unwrap();
                                    }
                                }
                            }
                            let got = out.get(&[n, o, i, j]).unwrap();
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::vector(&[1.0, 2.0]));
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let s = t.sum(x);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let sq = t.square(x);
        let s = t.sum(sq);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::vector(&[0.5, -1.5, 3.0]));
        let run = |store: &mut ParamStore<f64>| {
            let mut t = Tape::new();
            let x = t.param(store, id);
            let sq = t.square(x);
            let s = t.sum(sq);
            t.backward(s, store).unwrap();
        };
        run(&mut store);
        let once = store.get(id).grad.clone();
        run(&mut store);
        assert_eq!(store.get(id).grad, once.scale(2.0));

        // Two graph copies summed give twice the gradient of one.
        store.zero_grad();
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let a = t.square(x);
        let a = t.sum(a);
        let b = t.square(x);
        let b = t.sum(b);
        let s = t.add(a, b).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad, once.scale(2.0));

        let mut t = Tape::new();
        let x = t.param(&store, id);
        assert!(t.backward(x, &mut store).is_err());
    }

    #[test]
    fn max_pool_ties_go_to_lowest_index() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::full(&[1, 1, 2, 2], 1.0));
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let y = t.max_pool2d(x, 2, 2).unwrap();
        let s = t.sum(y);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    /// Builds `sum(w * op(x))` for every registered op and compares the
    /// tape gradient with central differences.
    #[test]
    fn registered_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        type Build = fn(&mut Tape<f64>, Var, &Tensor<f64>) -> Var;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("relu", vec![3, 4], |t, x, _| t.relu(x)),
            ("flatten", vec![2, 3, 2, 2], |t, x, _| t.flatten(x).unwrap()),
            ("pool", vec![2, 2, 4, 6], |t, x, _| t.max_pool2d(x, 2, 2).unwrap()),
            ("linear", vec![5, 4], |t, x, aux| {
                let w = t.input(aux.clone().reshape(&[3, 4]).unwrap());
                let b = t.input(Tensor::vector(&[0.1, -0.2, 0.3]));
                t.linear(x, w, b).unwrap()
            }),
            ("conv", vec![2, 2, 5, 5], |t, x, aux| {
                let w = t.input(aux.clone().reshape(&[3, 2, 2, 2]).unwrap());
                let b = t.input(Tensor::vector(&[0.1, -0.2, 0.3]));
                t.conv2d(x, w, b, 2, 1).unwrap()
            }),
            ("softmax_ce", vec![3, 4], |t, x, _| t.softmax_cross_entropy(x, &[1, 0, 3]).unwrap()),
        ];
        for (name, shape, build) in cases {
            let xv = rand_tensor(&mut rng, &shape);
            let aux = rand_tensor(&mut rng, &[12]);
            let aux = if name == "conv" { rand_tensor(&mut rng, &[24]) } else { aux };
            let weights_for = |t: &Tape<f64>, y: Var| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                rand_tensor(&mut r, t.value(y).shape())
            };
            let eval = |x: &Tensor<f64>| {
                let mut t = Tape::new();
                let xi = t.input(x.clone());
                let y = build(&mut t, xi, &aux);
                let w = weights_for(&t, y);
                let l = t.weighted_sum(y, w).unwrap();
                t.value(l).item().unwrap()
            };
            let mut store = ParamStore::new();
            let id = store.add("x", xv.clone());
            let mut t = Tape::new();
            let xi = t.param(&store, id);
            let y = build(&mut t, xi, &aux);
            let w = weights_for(&t, y);
            let l = t.weighted_sum(y, w).unwrap();
            t.backward(l, &mut store).unwrap();
            let report = finite_difference_check(eval, &xv, &store.get(id).grad, &FdOptions::default());
            assert!(report.passed(), "{name}: {report:?}");
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let wv = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let weights = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let eval = |w: &Tensor<f64>| {
            let mut t = Tape::new();
            let (x, wi, b) = (t.input(xv.clone()), t.input(w.clone()), t.input(Tensor::zeros(&[3])));
            let y = t.conv2d(x, wi, b, 1, 0).unwrap();
            let l = t.weighted_sum(y, weights.clone()).unwrap();
            t.value(l).item().unwrap()
        };
        let mut store = ParamStore::new();
        let id = store.add("w", wv.clone());
        let mut t = Tape::new();
        let (x, wi, b) = (t.input(xv.clone()), t.param(&store, id), t.input(Tensor::zeros(&[3])));
        let y = t.conv2d(x, wi, b, 1, 0).unwrap();
        let l = t.weighted_sum(y, weights.clone()).unwrap();
        t.backward(l, &mut store).unwrap();
        let report = finite_difference_check(eval, &wv, &store.get(id).grad, &FdOptions::default());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let wv = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let grads = |constant: bool| {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("w", wv.clone());
            let mut t = Tape::new();
            let x = if constant { t.constant(xv.clone()) } else { t.input(xv.clone()) };
            let (w, b) = (t.param(&store, id), t.input(Tensor::zeros(&[3])));
            let y = t.conv2d(x, w, b, 1, 1).unwrap();
            let y = t.flatten(y).unwrap();
            let w2 = t.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[4, 75]));
            let b2 = t.input(Tensor::zeros(&[4]));
            let z = t.linear(y, w2, b2).unwrap();
            let l = t.softmax_cross_entropy(z, &[0, 3]).unwrap();
            let g = t.backward(l, &mut store).unwrap();
            (g.wrt(x).is_some(), g.wrt(w2).is_some(), store.get(id).grad.clone())
        };
        let (xa, wa, ga) = grads(false);
        let (xb, wb, gb) = grads(true);
        assert!(xa && !xb);
        assert!(!wa && !wb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn quadratic_fd_is_essentially_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[20]);
        let grad = x.scale(2.0);
        let f = |v: &Tensor<f64>| v.data().iter().map(|a| a * a).sum::<f64>();
        let report = finite_difference_check(f, &x, &grad, &FdOptions::default());
        assert!(report.max_rel_error < 1e-7, "{}", report.max_rel_error);
        assert_eq!(report.entries.len(), 20);
        let opts = FdOptions {
            excluded: vec![3],
            ..FdOptions::default()
        };
        let report = finite_difference_check(f, &x, &grad, &opts);
        assert_eq!(report.excluded, vec![3]);
        assert_eq!(report.entries.len(), 19);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParamStore::<f64>::new();
            let id = store.add("w", rand_tensor(&mut rng, &[4, 6]));
            let xv = rand_tensor(&mut rng, &[8, 6]);
            let mut t = Tape::new();
            let (x, w, b) = (t.input(xv), t.param(&store, id), t.input(Tensor::zeros(&[4])));
            let y = t.linear(x, w, b).unwrap();
            let l = t.softmax_cross_entropy(y, &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
            t.backward(l, &mut store).unwrap();
            store.get(id).grad.clone()
        };
        assert_eq!(run(), run());
    }
}
