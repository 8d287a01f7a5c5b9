//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Tape::backward`]
//! then walks the record in reverse and accumulates adjoints. Leaves are either
//! constants (no gradient), inputs, or named parameters.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom, ConvSpec};
use crate::tensor::num_like::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Gate {
        x: Var,
        alpha: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Ln {
        x: Var,
    },
    Pow {
        x: Var,
        exponent: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub key: String,
    /// Running-statistics slot (timestep) the batch belongs to.
    pub slot: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    bn_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{op}: operand shapes {a} and {b} differ"
        )));
    }
    Ok(())
}

#[inline]
/// Logistic function kept strictly inside (0, 1) even where it rounds to an
/// endpoint.
fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    };
    s.max(T::MIN_POSITIVE).min(T::BELOW_ONE)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Named trainable leaf; its gradient is retrievable by name after
    /// [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_owned(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn record_batch_stats(&mut self, stats: BatchStats<T>) {
        self.bn_stats.push(stats);
    }

    /// Batch statistics in the order they were observed.
    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.bn_stats
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    // ---- convolution family -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let geom = ConvGeom::forward(xs, ws, spec)?;
        let out = conv::forward(&geom, xs.n, self.data(x), self.data(w));
        let value = Tensor::from_vec(Shape::new(xs.n, geom.out_c, geom.out_h, geom.out_w), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Transposed convolution; `w` is laid out `(in_ch, out_ch, kh, kw)`, the
    /// same tensor a `conv2d` mapping `out_ch -> in_ch` would use.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let geom = ConvGeom::transpose(xs, ws, spec)?;
        let out = conv::backward_data(&geom, xs.n, self.data(x), self.data(w));
        let value = Tensor::from_vec(Shape::new(xs.n, geom.in_c, geom.in_h, geom.in_w), out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, geom }, &[x, w]))
    }

    /// Adds a per-channel bias of shape `(1, c, 1, 1)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != Shape::new(1, xs.c, 1, 1) {
            return Err(Error::Shape(format!("bias {bs} does not match {xs}")));
        }
        let plane = xs.plane();
        let bias = self.data(b);
        let mut out = self.value(x).clone();
        out.clear_grad();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = bias[i % xs.c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first maximal element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2d needs even spatial dims, got {s}"
            )));
        }
        let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for plane in 0..s.n * s.c {
            let base = plane * s.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(T) -> T = match kind {
            Activation::Relu => |v| if v > T::ZERO { v } else { T::ZERO },
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => |v| v.tanh(),
        };
        self.unary(x, f, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    // ---- normalization ------------------------------------------------------

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<Shape> {
        let s = self.shape(x);
        let want = Shape::new(1, s.c, 1, 1);
        if self.shape(gamma) != want || self.shape(beta) != want {
            return Err(Error::Shape(format!(
                "batch norm over {s} needs scale/shift of shape {want}"
            )));
        }
        Ok(s)
    }

    /// Training-mode batch normalization over `(n, h, w)` per channel.
    /// Returns the output and the (biased) batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let s = self.check_bn_params(x, gamma, beta)?;
        let m = s.n * s.plane();
        if m < 2 {
            return Err(Error::Shape(format!(
                "training-mode batch norm needs at least 2 values per channel, got {s}"
            )));
        }
        let count = T::from_f64(m as f64);
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut mean = vec![T::ZERO; s.c];
        let mut var = vec![T::ZERO; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let o = (n * s.c + c) * s.plane();
                mean[c] += src[o..o + s.plane()].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= count);
        for n in 0..s.n {
            for c in 0..s.c {
                let o = (n * s.c + c) * s.plane();
                var[c] += src[o..o + s.plane()]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::ZERO; s.numel()];
        let mut out = vec![T::ZERO; s.numel()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let c = (i / s.plane()) % s.c;
            *xh = (src[i] - mean[c]) * inv_std[c];
            *o = g[c] * *xh + b[c];
        }
        let value = Tensor::from_vec(s, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let s = self.check_bn_params(x, gamma, beta)?;
        if mean.len() != s.c || var.len() != s.c {
            return Err(Error::Shape(
                "running statistics do not match channel count".into(),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = src
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / s.plane()) % s.c;
                g[c] * (v - mean[c]) * inv_std[c] + b[c]
            })
            .collect();
        let value = Tensor::from_vec(s, out)?;
        let op = Op::BatchNormFrozen {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    // ---- elementwise & structural -----------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.shape(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div { a, b }, &[a, b]))
    }

    /// Multiplies every channel of `x` by a single-channel map `alpha`.
    pub fn gate(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xs, as_) = (self.shape(x), self.shape(alpha));
        if as_ != Shape::new(xs.n, 1, xs.h, xs.w) {
            return Err(Error::Shape(format!(
                "gate map {as_} does not match features {xs}"
            )));
        }
        let (src, a) = (self.data(x), self.data(alpha));
        let plane = xs.plane();
        let out = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v * a[(i / (xs.c * plane)) * plane + i % plane])
            .collect();
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(value, Op::Gate { x, alpha }, &[x, alpha]))
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::Shape(format!("concat of {sa} and {sb}")));
        }
        let s = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut out = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            out.extend_from_slice(&self.data(a)[n * pa..(n + 1) * pa]);
            out.extend_from_slice(&self.data(b)[n * pb..(n + 1) * pb]);
        }
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, move |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::ZERO)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::ONE, T::ONE)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln { x })
    }

    pub fn pow(&mut self, x: Var, exponent: T) -> Var {
        self.unary(x, move |v| v.powf(exponent), Op::Pow { x, exponent })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, move |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Sum of all elements, as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::ONE / n)
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates d(root)/d(v) for every recorded value that needs a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::ONE]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, g: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let n = self.shape(*x).n;
                if self.wants(*x) {
                    acc(*x, conv::backward_data(geom, n, dy, self.data(*w)));
                }
                if self.wants(*w) {
                    acc(*w, conv::backward_weight(geom, n, self.data(*x), dy));
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                let n = self.shape(*x).n;
                if self.wants(*x) {
                    acc(*x, conv::forward(geom, n, dy, self.data(*w)));
                }
                if self.wants(*w) {
                    acc(*w, conv::backward_weight(geom, n, dy, self.data(*x)));
                }
            }
            Op::AddBias { x, b } => {
                let s = self.shape(*x);
                if self.wants(*x) {
                    acc(*x, dy.to_vec());
                }
                if self.wants(*b) {
                    let mut gb = vec![T::ZERO; s.c];
                    for (i, chunk) in dy.chunks(s.plane()).enumerate() {
                        gb[i % s.c] += chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::ZERO; self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    gx[src] += g;
                }
                acc(*x, gx);
            }
            Op::Act { x, kind } => {
                let gx = match kind {
                    Activation::Relu => dy
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
                        .collect(),
                    Activation::Sigmoid => dy
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| g * y * (T::ONE - y))
                        .collect(),
                    Activation::Tanh => dy
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| g * (T::ONE - y * y))
                        .collect(),
                };
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let m = T::from_f64((s.n * s.plane()) as f64);
                let mut sum_dy = vec![T::ZERO; s.c];
                let mut sum_dy_xhat = vec![T::ZERO; s.c];
                for (i, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
                    let c = (i / s.plane()) % s.c;
                    sum_dy[c] += g;
                    sum_dy_xhat[c] += g * xh;
                }
                if self.wants(*x) {
                    let gam = self.data(*gamma);
                    let gx = dy
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&g, &xh))| {
                            let c = (i / s.plane()) % s.c;
                            gam[c] * inv_std[c] / m * (m * g - sum_dy[c] - xh * sum_dy_xhat[c])
                        })
                        .collect();
                    acc(*x, gx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, sum_dy_xhat);
                }
                if self.wants(*beta) {
                    acc(*beta, sum_dy);
                }
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.shape(*x);
                let src = self.data(*x);
                let gam = self.data(*gamma);
                let mut gg = vec![T::ZERO; s.c];
                let mut gb = vec![T::ZERO; s.c];
                let mut gx = vec![T::ZERO; dy.len()];
                for (i, &g) in dy.iter().enumerate() {
                    let c = (i / s.plane()) % s.c;
                    gx[i] = g * gam[c] * inv_std[c];
                    gg[c] += g * (src[i] - mean[c]) * inv_std[c];
                    gb[c] += g;
                }
                if self.wants(*x) {
                    acc(*x, gx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, gg);
                }
                if self.wants(*beta) {
                    acc(*beta, gb);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, dy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, dy.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    acc(*a, dy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, dy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    acc(*a, dy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, dy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Div { a, b } => {
                let vb = self.data(*b);
                if self.wants(*a) {
                    acc(*a, dy.iter().zip(vb).map(|(&g, &y)| g / y).collect());
                }
                if self.wants(*b) {
                    let gb = dy
                        .iter()
                        .zip(vb)
                        .zip(out)
                        .map(|((&g, &y), &q)| -g * q / y)
                        .collect();
                    acc(*b, gb);
                }
            }
            Op::Gate { x, alpha } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let (src, a) = (self.data(*x), self.data(*alpha));
                let at = |i: usize| (i / (s.c * plane)) * plane + i % plane;
                if self.wants(*x) {
                    acc(
                        *x,
                        dy.iter().enumerate().map(|(i, &g)| g * a[at(i)]).collect(),
                    );
                }
                if self.wants(*alpha) {
                    let mut ga = vec![T::ZERO; a.len()];
                    for (i, (&g, &v)) in dy.iter().zip(src).enumerate() {
                        ga[at(i)] += g * v;
                    }
                    acc(*alpha, ga);
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for chunk in dy.chunks(pa + pb) {
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Affine { x, scale } => acc(*x, dy.iter().map(|&g| g * *scale).collect()),
            Op::Ln { x } => {
                acc(
                    *x,
                    dy.iter().zip(self.data(*x)).map(|(&g, &v)| g / v).collect(),
                );
            }
            Op::Pow { x, exponent } => {
                let e = *exponent;
                let gx = dy
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| g * e * v.powf(e - T::ONE))
                    .collect();
                acc(*x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = dy
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| if v < *lo || v > *hi { T::ZERO } else { g })
                    .collect();
                acc(*x, gx);
            }
            Op::Sum { x } => acc(*x, vec![dy[0]; self.value(*x).len()]),
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }
}
