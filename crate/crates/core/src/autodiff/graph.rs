//! Define-by-run computation graph with reverse-mode differentiation.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;

use super::broadcast::{broadcast_shape, expand, pad4, reduce_to, zip_broadcast};
use super::kernels::{channel_stats, conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name, in binding order.
pub type GradientMap<T> = IndexMap<String, Tensor<T>>;

/// Batch statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var, usize),
    BroadcastTo(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MatMul(Var, Var),
    GlobalAvgPool(Var),
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    GradReverse(Var, T),
    Concat(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        label: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph. Nodes are appended in evaluation order, which is
/// therefore always a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Neg(a)
            | Op::Sum(a)
            | Op::Mean(a, _)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a)
            | Op::GradReverse(a, _) => vec![*a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNormTrain {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }

    /// A leaf that participates in differentiation.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable parameter. Binding the same name twice
    /// returns the existing node so that gradients accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.input(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers an existing leaf under a parameter name.
    pub fn register_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let data = zip_broadcast(
            self.value(a).data(),
            &sa,
            self.value(b).data(),
            &sb,
            &out,
            f,
        );
        self.push(Tensor::from_parts(out, data), op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, op, name)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, "scale", |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(
            a,
            "leaky_relu",
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", |x| x.abs(), Op::Abs(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "neg", |x| -x, Op::Neg(a))
    }

    // ---- reductions and shape ----------------------------------------

    fn reduced_shape(&self, a: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape(a);
        let mut out = shape.to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::InvalidAxis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
            out[ax] = 1;
        }
        Ok(out)
    }

    /// Sums over `axes`, keeping them as extent 1. An empty axis set is the
    /// identity.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduced_shape(a, axes)?;
        let t = self.value(a);
        let data = reduce_to(t.data(), t.shape(), &out);
        self.push(Tensor::from_parts(out, data), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduced_shape(a, axes)?;
        let t = self.value(a);
        let count = t.len() / out.iter().product::<usize>();
        let inv = T::one() / T::from_usize(count).unwrap();
        let data = reduce_to(t.data(), t.shape(), &out)
            .into_iter()
            .map(|v| v * inv)
            .collect();
        self.push(Tensor::from_parts(out, data), Op::Mean(a, count), "mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", &src, shape)),
        }
        let data = expand(self.value(a).data(), &src, shape);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(a),
            "broadcast_to",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    // ---- linear algebra ----------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw()?;
        let [oc, ic, kh, kw] = self.value(weight).nchw()?;
        if ic != c {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [oc] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[oc]));
            }
        }
        if stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidShape {
                shape: self.shape(weight).to_vec(),
                reason: format!("kernel does not fit padded input {h}x{w} (padding {padding}, stride {stride})"),
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let data = conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::from_parts(vec![n, oc, geom.oh, geom.ow], data);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), "matmul")
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).nchw()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = self
            .value(a)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Tensor::from_parts(vec![n, c, 1, 1], data),
            Op::GlobalAvgPool(a),
            "global_avg_pool",
        )
    }

    // ---- normalization -----------------------------------------------

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = self.value(input).nchw()?;
        for p in [gamma, beta] {
            if self.shape(p) != [dims[1]] {
                return Err(Error::shape("batch_norm", self.shape(p), &[dims[1]]));
            }
        }
        Ok(dims)
    }

    /// Normalizes by batch statistics over `(N, H, W)`; returns the batch
    /// statistics so the caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let [n, c, h, w] = self.check_affine(input, gamma, beta)?;
        let hw = h * w;
        if n * hw < 2 {
            return Err(Error::TooFewForBatchNorm(n * hw));
        }
        let x = self.value(input).data();
        let (mean, var) = channel_stats(x, n, c, hw);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], y);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
        )?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: n * hw,
            },
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let [n, c, h, w] = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[running_mean.len()], &[c]));
        }
        let hw = h * w;
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (mu, is) = (running_mean[ch], inv_std[ch]);
                for i in off..off + hw {
                    y[i] = g[ch] * (x[i] - mu) * is + b[ch];
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], y);
        self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            "batch_norm",
        )
    }

    // ---- structural ----------------------------------------------------

    /// Identity in the forward pass; multiplies the gradient by `-lambda`
    /// in the backward pass.
    pub fn grad_reverse(&mut self, a: Var, lambda: T) -> Result<Var> {
        let t = self.value(a).clone();
        self.push(t, Op::GradReverse(a, lambda), "grad_reverse")
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?;
        let [n, _, h, w] = self.value(first).nchw()?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).nchw()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            channels += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let out = Tensor::from_parts(vec![n, channels, h, w], data);
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    // ---- fused losses ----------------------------------------------------

    /// Mean multi-class cross entropy of `(N, m)` logits, computed with a
    /// max shift.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (n, m) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: m,
            });
        }
        let z = self.value(logits).data();
        let mut softmax = vec![T::zero(); n * m];
        let mut total = T::zero();
        for i in 0..n {
            let row = &z[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            total = total + lse - row[labels[i]];
            for j in 0..m {
                softmax[i * m + j] = (row[j] - mx).exp() / se;
            }
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            "cross_entropy",
        )
    }

    /// Mean binary cross entropy of logits against a constant label `D`,
    /// `softplus(z) - D*z` per location.
    pub fn bce_with_logits(&mut self, logits: Var, label: T) -> Result<Var> {
        let z = self.value(logits).data();
        let total: T = z.iter().map(|&v| softplus(v) - label * v).sum();
        let loss = total / T::from_usize(z.len()).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, label },
            "bce_with_logits",
        )
    }

    // ---- differentiation -------------------------------------------------

    /// Hash of the sign pattern at every non-differentiable point in the
    /// graph (ReLU, LeakyReLU, abs inputs). Two evaluations with the same
    /// signature lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) = node.op {
                for &x in self.nodes[a.0].value.data() {
                    (x > T::zero()).hash(&mut h);
                    (x < T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a single-valued `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads: Vec<Option<Tensor<T>>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients {
            grads,
            params: self
                .params
                .iter()
                .filter(|(_, v)| self.nodes[v.0].requires_grad)
                .map(|(k, v)| (k.clone(), *v, self.nodes[v.0].value.shape().to_vec()))
                .collect(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let mut acc = |v: Var, delta: Vec<T>| {
            debug_assert!(v.0 < idx, "graph order violated");
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, out_shape, shp(*a)));
                acc(*b, reduce_to(g, out_shape, shp(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, out_shape, shp(*a)));
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                acc(*b, reduce_to(&neg, out_shape, shp(*b)));
            }
            Op::Mul(a, b) => {
                let eb = expand(val(*b), shp(*b), out_shape);
                let ea = expand(val(*a), shp(*a), out_shape);
                let ga: Vec<T> = g.iter().zip(&eb).map(|(&x, &y)| x * y).collect();
                let gb: Vec<T> = g.iter().zip(&ea).map(|(&x, &y)| x * y).collect();
                acc(*a, reduce_to(&ga, out_shape, shp(*a)));
                acc(*b, reduce_to(&gb, out_shape, shp(*b)));
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::LeakyRelu(a, s) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { d * *s })
                    .collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect(),
            ),
            Op::Abs(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| {
                        if x > T::zero() {
                            d
                        } else if x < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            ),
            Op::Neg(a) => acc(*a, g.iter().map(|&x| -x).collect()),
            Op::Sum(a) => acc(*a, expand(g, out_shape, shp(*a))),
            Op::Mean(a, count) => {
                let inv = T::one() / T::from_usize(*count).unwrap();
                let scaled: Vec<T> = g.iter().map(|&x| x * inv).collect();
                acc(*a, expand(&scaled, out_shape, shp(*a)));
            }
            Op::BroadcastTo(a) => acc(*a, reduce_to(g, out_shape, shp(*a))),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.nodes[input.0].requires_grad,
                    self.nodes[weight.0].requires_grad,
                    bias.map(|b| self.nodes[b.0].requires_grad).unwrap_or(false),
                );
                let cg = conv2d_backward(val(*input), val(*weight), g, geom, need);
                if let Some(dx) = cg.input {
                    acc(*input, dx);
                }
                if let Some(dw) = cg.weight {
                    acc(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    acc(*b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (shp(*a)[0], shp(*a)[1]);
                let m = shp(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); n * k];
                    gemm(n, m, k, g, false, val(*b), true, T::zero(), &mut da);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k * m];
                    gemm(k, n, m, val(*a), true, g, false, T::zero(), &mut db);
                    acc(*b, db);
                }
            }
            Op::GlobalAvgPool(a) => {
                let p4 = pad4(shp(*a));
                let hw = p4[2] * p4[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut d = Vec::with_capacity(g.len() * hw);
                for &x in g {
                    d.extend(std::iter::repeat_n(x * inv, hw));
                }
                acc(*a, d);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = pad4(out_shape);
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gm = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch] / m;
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [n, c, h, w] = pad4(out_shape);
                let hw = h * w;
                let x = val(*input);
                let gm = val(*gamma);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = g[i] * gm[ch] * inv_std[ch];
                            dgamma[ch] += g[i] * (x[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::GradReverse(a, lambda) => acc(*a, g.iter().map(|&x| -(*lambda * x)).collect()),
            Op::Concat(parts) => {
                let [n, c, h, w] = pad4(out_shape);
                let hw = h * w;
                let mut start = 0;
                for &p in parts {
                    let pc = shp(p)[1];
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for b in 0..n {
                        let off = (b * c + start) * hw;
                        d.extend_from_slice(&g[off..off + pc * hw]);
                    }
                    acc(p, d);
                    start += pc;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let n = labels.len();
                let m = softmax.len() / n;
                let k = g[0] / T::from_usize(n).unwrap();
                let mut d: Vec<T> = softmax.iter().map(|&p| p * k).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * m + l] -= k;
                }
                acc(*logits, d);
            }
            Op::BceWithLogits { logits, label } => {
                let z = val(*logits);
                let k = g[0] / T::from_usize(z.len()).unwrap();
                acc(*logits, z.iter().map(|&v| (sigmoid(v) - *label) * k).collect());
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var, Vec<usize>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every bound parameter that requires one; parameters
    /// the loss does not reach get a zero gradient.
    pub fn param_map(&self) -> GradientMap<T> {
        self.params
            .iter()
            .map(|(name, v, shape)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::from_parts(shape.clone(), vec![T::zero(); shape.iter().product()]));
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
