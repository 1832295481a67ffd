//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application in order. Values are
//! immutable once recorded; [`Tape::backward`] walks the recording in strict
//! reverse order and accumulates gradients additively, so a value consumed by
//! several primitives receives the sum of its branch gradients.
//!
//! Nodes whose inputs carry no gradient requirement are never visited during
//! the backward pass. Adapting a frozen backbone therefore only pays for the
//! part of the graph downstream of the trainable tensors.

mod gradcheck;
mod kernels;

use std::collections::HashMap;

pub use gradcheck::{grad_check, grad_check_inputs, relative_error};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Real, Tensor};
use kernels::{channel_planes, channel_sums, conv2d_backward, conv2d_forward, nchw, ConvGeom};

/// Batch-norm moving momentum used when none is configured.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor used when none is configured.
pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. The affine pair lives on the
/// tape as ordinary parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(BN_MOMENTUM),
            epsilon: T::lit(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, keyed by leaf handle.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.map.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drop all recorded nodes and allow a new backward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sign of every ReLU input recorded so far, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu { x } = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>, name: &str) -> Result<Var> {
        ensure_finite(&value, name)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, rg, op))
    }

    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(out, &inputs, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// Batch normalization over N, H, W per channel.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `state`; eval mode reads the running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BnState<T>, mode: Mode) -> Result<Var> {
        let (n, c, plane) = nchw(self.value(x).shape(), "batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c || state.channels() != c {
            return Err(Error::dim(format!(
                "batch_norm over {c} channels got gamma {}, beta {}, state {}",
                self.value(gamma).len(),
                self.value(beta).len(),
                state.channels()
            )));
        }
        let xs = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let m = n * plane;
                if m < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch_norm in train mode needs at least 2 values per channel, got {m}"
                    )));
                }
                let mut mean = vec![T::zero(); c];
                for (ch, p) in channel_planes(xs, c, plane) {
                    mean[ch] += p.iter().copied().sum::<T>();
                }
                let mf = T::from_usize(m).unwrap();
                mean.iter_mut().for_each(|v| *v = *v / mf);
                let mut var = vec![T::zero(); c];
                for (ch, p) in channel_planes(xs, c, plane) {
                    let mu = mean[ch];
                    var[ch] += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                var.iter_mut().for_each(|v| *v = *v / mf);
                let mom = state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                    state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (ch, p) in channel_planes(xs, c, plane) {
            let (mu, is) = (mean[ch], inv_std[ch]);
            for &v in p {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(g[ch] * h + bt[ch]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        self.record(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            "batch_norm",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.record(out, &[x], Op::Relu { x }, "relu")
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, plane) = nchw(xv.shape(), "global_avg_pool")?;
        let pf = T::from_usize(plane).unwrap();
        let out: Vec<T> = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / pf)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        self.record(out, &[x], Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    /// `x·wᵀ + b` for `x: [N,D]`, `w: [K,D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] || bv.len() != wv.shape()[0] {
            return Err(Error::dim(format!(
                "linear shapes incompatible: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (n, d, k) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        T::gemm(n, d, k, T::one(), xv.data(), d as isize, 1, wv.data(), 1, d as isize, T::one(), &mut out, k as isize, 1);
        let out = Tensor::new(&[n, k], out)?;
        self.record(out, &[x, w, b], Op::Linear { x, w, b }, "linear")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(lv.data(), k);
        let mut loss = T::zero();
        for (&lab, lrow) in labels.iter().zip(lv.data().chunks(k)) {
            let mx = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = lrow.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - lrow[lab];
        }
        loss = loss / T::from_usize(n).unwrap();
        self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Per-channel affine map `gamma[c]·x + beta[c]` on `[N,C,H,W]` input.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c, plane) = nchw(self.value(x).shape(), "channel_affine")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::dim(format!(
                "channel_affine over {c} channels got gamma {} and beta {}",
                g.len(),
                b.len()
            )));
        }
        let (g, b) = (g.data(), b.data());
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for (ch, p) in channel_planes(xv.data(), c, plane) {
            out.extend(p.iter().map(|&v| g[ch] * v + b[ch]));
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.record(out, &[x, gamma, beta], Op::ChannelAffine { x, gamma, beta }, "channel_affine")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |u, v| u + v)?;
        self.record(out, &[a, b], Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |u, v| u * v)?;
        self.record(out, &[a, b], Op::Mul { a, b }, "mul")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, &[x], Op::Sum { x }, "sum")
    }

    fn zip_same(&self, a: Var, b: Var, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&u, &v)| f(u, v)).collect();
        Tensor::new(av.shape(), data)
    }

    /// Reverse sweep from a scalar `loss`. May run once per recording; call
    /// [`Tape::reset`] before reusing the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape; reset it first"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                out.map.insert(Var(i), Tensor::new(&shape, dy)?);
                continue;
            }
            for (v, g) in self.node_backward(i, &dy) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => grads[v.0] = Some(g),
                }
            }
        }
        for g in out.map.values() {
            ensure_finite(g, "backward")?;
        }
        Ok(out)
    }

    fn node_backward(&self, i: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want = (rg(*x), rg(*w), b.is_some_and(rg));
                let gr = conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), dy, want);
                res.extend(gr.dx.map(|d| (*x, d)));
                res.extend(gr.dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, gr.db) {
                    res.push((*b, d));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, plane) = nchw(node.value.shape(), "batch_norm").expect("recorded shape");
                let (sum_dy, sum_dy_xhat) = channel_sums(dy, xhat, c, plane);
                if rg(*gamma) {
                    res.push((*gamma, sum_dy_xhat.clone()));
                }
                if rg(*beta) {
                    res.push((*beta, sum_dy.clone()));
                }
                if rg(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(dy.len());
                    if *train {
                        let m = T::from_usize(n * plane).unwrap();
                        for (idx, (ch, p)) in channel_planes(dy, c, plane).enumerate() {
                            let scale = g[ch] * inv_std[ch] / m;
                            let xh = &xhat[idx * plane..(idx + 1) * plane];
                            for (&d, &h) in p.iter().zip(xh) {
                                dx.push(scale * (m * d - sum_dy[ch] - h * sum_dy_xhat[ch]));
                            }
                        }
                    } else {
                        for (ch, p) in channel_planes(dy, c, plane) {
                            let scale = g[ch] * inv_std[ch];
                            dx.extend(p.iter().map(|&d| d * scale));
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                let dx = dy
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                    .collect();
                res.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let plane = xs[2] * xs[3];
                let pf = T::from_usize(plane).unwrap();
                let mut dx = Vec::with_capacity(plane * dy.len());
                for &d in dy {
                    dx.extend(std::iter::repeat_n(d / pf, plane));
                }
                res.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d, k) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if rg(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, k, d, T::one(), dy, k as isize, 1, wv.data(), d as isize, 1, T::zero(), &mut dx, d as isize, 1);
                    res.push((*x, dx));
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); k * d];
                    T::gemm(k, n, d, T::one(), dy, 1, k as isize, xv.data(), d as isize, 1, T::zero(), &mut dw, d as isize, 1);
                    res.push((*w, dw));
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k];
                    for row in dy.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    res.push((*b, db));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = dy[0] / T::from_usize(labels.len()).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &lab) in labels.iter().enumerate() {
                    dl[row * k + lab] -= scale;
                }
                res.push((*logits, dl));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (_, c, plane) = nchw(node.value.shape(), "channel_affine").expect("recorded shape");
                let xs = self.value(*x).data();
                if rg(*gamma) || rg(*beta) {
                    let (sum_dy, sum_dy_x) = channel_sums(dy, xs, c, plane);
                    if rg(*gamma) {
                        res.push((*gamma, sum_dy_x));
                    }
                    if rg(*beta) {
                        res.push((*beta, sum_dy));
                    }
                }
                if rg(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(dy.len());
                    for (ch, p) in channel_planes(dy, c, plane) {
                        dx.extend(p.iter().map(|&d| d * g[ch]));
                    }
                    res.push((*x, dx));
                }
            }
            Op::Add { a, b } => {
                res.push((*a, dy.to_vec()));
                res.push((*b, dy.to_vec()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                res.push((*a, dy.iter().zip(bv).map(|(&d, &v)| d * v).collect()));
                res.push((*b, dy.iter().zip(av).map(|(&d, &v)| d * v).collect()));
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                res.push((*x, vec![dy[0]; n]));
            }
        }
        res
    }
}

/// Row-wise softmax, max-subtracted.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - mx).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

#[cfg(test)]
mod tests;
