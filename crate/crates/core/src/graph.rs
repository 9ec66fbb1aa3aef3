//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Nodes that do not
//! depend on any gradient-requiring leaf are never visited by
//! [`Graph::backward`], so frozen networks cost only their forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatT {
    N,
    T,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool3(Var),
    ResizeNearest(Var),
    ChannelNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelMean(Var),
    ChannelStd(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: MatT,
        tb: MatT,
    },
    SoftmaxRows(Var),
    SampleNorm(Var),
    MeanAll(Var),
    SumAll(Var),
    NegLogSigmoid(Var),
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// σ outputs are clamped to this floor before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies every tensor of `store` into the graph as a leaf.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Bound {
        Bound {
            vars: store
                .tensors()
                .map(|t| self.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `Σ coef_i · v_i` over scalar or same-shaped vars.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Option<Var> {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                Some(a) => self.add(a, scaled),
                None => scaled,
            });
        }
        acc
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("graph reshape: element count mismatch");
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::max_pool2(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let value = kernels::avg_pool3(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::AvgPool3(x), rg)
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = kernels::resize_nearest(self.value(x), h, w);
        let rg = self.rg(&[x]);
        self.push(value, Op::ResizeNearest(x), rg)
    }

    pub fn channel_norm(&mut self, x: Var, eps: T) -> Var {
        let (value, inv_std) = kernels::channel_norm(self.value(x), eps);
        let rg = self.rg(&[x]);
        self.push(value, Op::ChannelNorm { x, inv_std }, rg)
    }

    /// Spatial mean per channel: `B×C×H×W → B×C`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let n = h * w;
        let nf = T::from_f64(n as f64);
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|p| p.iter().copied().sum::<T>() / nf)
            .collect();
        let value = Tensor::from_vec(&[b, c], data).expect("channel_mean shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::ChannelMean(x), rg)
    }

    /// Spatial `sqrt(var + eps)` per channel (biased variance): `B×C×H×W → B×C`.
    pub fn channel_std(&mut self, x: Var, eps: T) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let n = h * w;
        let nf = T::from_f64(n as f64);
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|p| {
                let mean = p.iter().copied().sum::<T>() / nf;
                let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                (var + eps).sqrt()
            })
            .collect();
        let value = Tensor::from_vec(&[b, c], data).expect("channel_std shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::ChannelStd(x), rg)
    }

    /// Batched matrix product over rank-3 vars `B×M×K · B×K×N`, with optional
    /// per-operand transposition of the trailing two axes.
    pub fn bmm(&mut self, a: Var, ta: MatT, b: Var, tb: MatT) -> Var {
        let value = bmm_value(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Bmm { a, b, ta, tb }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().expect("softmax of rank-0 tensor");
        let value = Tensor::from_vec(t.shape(), kernels::softmax_rows(t.data(), cols))
            .expect("softmax shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Euclidean norm of each leading-axis item: `B×… → B`.
    ///
    /// The gradient at a zero norm is taken to be zero.
    pub fn sample_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let b = t.shape()[0];
        let per = t.numel() / b.max(1);
        let data = t
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Tensor::from_vec(&[b], data).expect("sample_norm shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SampleNorm(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_f64(t.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Elementwise `-ln(max(σ(x), 1e-7))`.
    pub fn neg_log_sigmoid(&mut self, x: Var) -> Var {
        let floor = T::from_f64(LOG_CLAMP);
        let value = self.value(x).map(|v| -sigmoid(v).max(floor).ln());
        let rg = self.rg(&[x]);
        self.push(value, Op::NegLogSigmoid(x), rg)
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_batch(&tensors).expect("concat_batch shapes");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatBatch(parts.to_vec()), rg)
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).batch_slice(start, len);
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceBatch { x, start }, rg)
    }

    /// Back-propagates from a scalar `root`, seeding its gradient with one.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            // Interior gradients are released once consumed.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.shape(*a)).expect("reshape grad");
                self.accumulate(grads, *a, shaped);
            }
            Op::Relu(a) => {
                let d = g.zip_map(out, |gv, o| if o > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * slope });
                self.accumulate(grads, *a, d);
            }
            Op::Conv { x, w, b, geom } => {
                let want = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.map(|b| self.requires_grad(b)).unwrap_or(false),
                );
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *geom, want);
                if let Some(d) = cg.input {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = cg.weight {
                    self.accumulate(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d.data_mut()[src] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool3(x) => {
                let d = kernels::avg_pool3_backward(self.shape(*x), g);
                self.accumulate(grads, *x, d);
            }
            Op::ResizeNearest(x) => {
                let d = kernels::resize_nearest_backward(self.shape(*x), g);
                self.accumulate(grads, *x, d);
            }
            Op::ChannelNorm { x, inv_std } => {
                let d = kernels::channel_norm_backward(out, inv_std, g);
                self.accumulate(grads, *x, d);
            }
            Op::ChannelMean(x) => {
                let xs = self.value(*x);
                let (_, _, h, w) = xs.dims4();
                let n = h * w;
                let nf = T::from_f64(n as f64);
                let d = Tensor::from_fn(xs.shape(), |i| g.data()[i / n] / nf);
                self.accumulate(grads, *x, d);
            }
            Op::ChannelStd(x) => {
                let xs = self.value(*x);
                let (_, _, h, w) = xs.dims4();
                let n = h * w;
                let nf = T::from_f64(n as f64);
                let means: Vec<T> = xs.data().chunks(n).map(|p| p.iter().copied().sum::<T>() / nf).collect();
                let d = Tensor::from_fn(xs.shape(), |i| {
                    let p = i / n;
                    g.data()[p] * (xs.data()[i] - means[p]) / (nf * out.data()[p])
                });
                self.accumulate(grads, *x, d);
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // C = op(A)·op(B); dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G
                if self.requires_grad(*a) {
                    let d = match ta {
                        MatT::N => bmm_value(g, MatT::N, vb, flip(*tb)),
                        MatT::T => bmm_value(vb, *tb, g, MatT::T),
                    };
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = match tb {
                        MatT::N => bmm_value(va, flip(*ta), g, MatT::N),
                        MatT::T => bmm_value(g, MatT::T, va, *ta),
                    };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = *out.shape().last().unwrap();
                let mut d = Tensor::zeros(out.shape());
                for ((dr, gr), yr) in d
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(g.data().chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SampleNorm(x) => {
                let xs = self.value(*x);
                let per = xs.numel() / out.numel().max(1);
                let d = Tensor::from_fn(xs.shape(), |i| {
                    let nrm = out.data()[i / per];
                    if nrm > T::zero() {
                        g.data()[i / per] * xs.data()[i] / nrm
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::MeanAll(x) => {
                let shape = self.shape(*x);
                let n: usize = shape.iter().product();
                let d = Tensor::full(shape, g.data()[0] / T::from_f64(n as f64));
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let d = Tensor::full(self.shape(*x), g.data()[0]);
                self.accumulate(grads, *x, d);
            }
            Op::NegLogSigmoid(x) => {
                let floor = T::from_f64(LOG_CLAMP);
                let d = g.zip_map(self.value(*x), |gv, v| {
                    let s = sigmoid(v);
                    if s < floor {
                        T::zero()
                    } else {
                        -gv * (T::one() - s)
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::ConcatBatch(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[0];
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.batch_slice(start, len));
                    }
                    start += len;
                }
            }
            Op::SliceBatch { x, start } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let mut d = Tensor::zeros(self.shape(*x));
                let per: usize = g.shape()[1..].iter().product();
                d.data_mut()[start * per..start * per + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
        }
    }
}

fn flip(t: MatT) -> MatT {
    match t {
        MatT::N => MatT::T,
        MatT::T => MatT::N,
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Logical `(rows, cols)` of `op(x)` plus the row/column strides into `x`.
fn mat_view(shape: &[usize], t: MatT) -> (usize, usize, (isize, isize)) {
    assert_eq!(shape.len(), 3, "bmm operands must be rank 3, got {shape:?}");
    let (r, c) = (shape[1], shape[2]);
    match t {
        MatT::N => (r, c, (c as isize, 1)),
        MatT::T => (c, r, (1, c as isize)),
    }
}

pub fn bmm_value<T: Real>(a: &Tensor<T>, ta: MatT, b: &Tensor<T>, tb: MatT) -> Tensor<T> {
    let (m, k, sa) = mat_view(a.shape(), ta);
    let (k2, n, sb) = mat_view(b.shape(), tb);
    assert_eq!(k, k2, "bmm inner dims {:?}{:?} vs {:?}{:?}", a.shape(), ta, b.shape(), tb);
    let batch = a.shape()[0];
    assert_eq!(batch, b.shape()[0], "bmm batch mismatch");
    let mut out = Tensor::zeros(&[batch, m, n]);
    let (pa, pb) = (m * k, k * n);
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * pa..(i + 1) * pa],
            sa,
            &b.data()[i * pb..(i + 1) * pb],
            sb,
            T::zero(),
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
        );
    }
    out
}

/// Leaf vars of a [`ParamStore`] bound into a graph, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: crate::params::ParamId) -> Var {
        self.vars[id.index()]
    }
}
