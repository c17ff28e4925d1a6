//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append nodes in execution order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

mod conv;
mod norm;

use rand::Rng;

pub use norm::{BatchNormConfig, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Element-wise operations exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    Sigmoid,
    Tanh,
    Hadamard,
    Add,
    SubFromOne,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    OneMinus(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Dropout {
        input: Var,
        scale: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Vec<Var>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool_2x2",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::OneMinus(_) => "sub_from_one",
            Op::Dense { .. } => "dense",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Dropout { .. } => "dropout",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => std::iter::once(*input)
                .chain(std::iter::once(*kernel))
                .chain(*bias)
                .collect(),
            Op::Dense {
                input, weight, bias, ..
            } => std::iter::once(*input)
                .chain(std::iter::once(*weight))
                .chain(*bias)
                .collect(),
            Op::MaxPool { input, .. } | Op::Dropout { input, .. } => vec![*input],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::OneMinus(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Mean(vs) => vs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// One entry of the computation record: which operation produced which node
/// from which inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// The computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: operands have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Row-wise numerically stable softmax of `[rows, k]` logits.
pub fn softmax_rows<T: Element>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Only leaves created with `requires_grad` ever receive a
    /// gradient buffer.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// The recorded operations in execution order.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| RecordEntry {
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    /// Same-padded 3x3 cross-correlation of `[batch, in_ch, h, w]` with
    /// `[out_ch, in_ch, 3, 3]` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input and kernel, got input {xs:?} and kernel {ks:?}"
            )));
        }
        if ks[2] != conv::KSIZE || ks[3] != conv::KSIZE {
            return Err(Error::shape(format!("conv2d kernel must be 3x3, got kernel {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {xs:?} vs kernel {ks:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} does not match kernel {ks:?}",
                    self.shape(b)
                )));
            }
        }
        let dims = conv::ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ks[0],
            h: xs[2],
            w: xs[3],
        };
        let out = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::from_vec([dims.batch, dims.out_ch, dims.h, dims.w], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }))
    }

    /// Non-overlapping 2x2 max pooling.
    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("max_pool_2x2 expects 4-d input, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool_2x2 needs even spatial extents, got {s:?}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] || x[idx].is_nan() {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_vec([b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() - x);
        self.push(v, Op::OneMinus(a))
    }

    fn binary(&mut self, what: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(what, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    /// Dispatches one of the element-wise operations. Binary operations need
    /// `b`; unary ones reject it.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, b) {
            (Relu, None) => Ok(self.relu(a)),
            (Sigmoid, None) => Ok(self.sigmoid(a)),
            (Tanh, None) => Ok(self.tanh(a)),
            (SubFromOne, None) => Ok(self.one_minus(a)),
            (Hadamard, Some(b)) => self.hadamard(a, b),
            (Add, Some(b)) => self.add(a, b),
            (op, _) => Err(Error::invalid(format!("wrong operand count for {op:?}"))),
        }
    }

    /// Affine map of `[batch, n]` through a `[m, n]` weight.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "dense inner-dimension mismatch: input {xs:?} vs weight {ws:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!(
                    "dense bias {:?} does not match weight {ws:?}",
                    self.shape(b)
                )));
            }
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * m];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::row_major(self.value(input).data(), batch, n),
            MatRef::row_major(self.value(weight).data(), m, n).t(),
            T::one(),
            &mut out,
        );
        let value = Tensor::from_vec([batch, m], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }))
    }

    /// Softmax over the last axis of `[batch, k]` logits and mean negative
    /// log-likelihood of `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Tensor<T>, Var)> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::shape(format!(
                "softmax_cross_entropy expects [batch, k>=2] logits, got {s:?}"
            )));
        }
        let (batch, k) = (s[0], s[1]);
        if targets.len() != batch {
            return Err(Error::shape(format!(
                "{} targets for a batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let probs = softmax_rows(x, k);
        let mut loss = T::zero();
        for (row, &t) in x.chunks_exact(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        loss /= T::of(batch as f64);
        let probs_t = Tensor::from_vec([batch, k], probs.clone())?;
        let var = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        );
        Ok((probs_t, var))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that
    /// evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.value(input).len();
        let scale = if !training || rate == 0.0 {
            vec![T::one(); n]
        } else {
            let keep = T::of(1.0 / (1.0 - rate));
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                .collect()
        };
        let x = self.value(input);
        let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, scale }))
    }

    /// Per-channel batch normalization of `[batch, ch, h, w]` (or `[batch, ch]`).
    ///
    /// Training mode normalizes with batch statistics over batch and spatial
    /// axes and folds them into `stats`; evaluation mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        training: bool,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("batch_norm expects [batch, ch, ..], got {s:?}")));
        }
        let (batch, ch) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || stats.channels() != ch {
            return Err(Error::shape(format!(
                "batch_norm parameters do not match {ch} channels of input {s:?}"
            )));
        }
        if training && batch < 2 {
            return Err(Error::invalid("batch_norm in training mode needs a batch of at least 2"));
        }
        let eps = T::of(cfg.eps);
        let x = self.value(input).data();
        let (mean, var) = if training {
            let (m, v) = norm::channel_moments(x, batch, ch, hw);
            stats.update(&m, &v, T::of(cfg.momentum));
            (m, v)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = g[c] * xh + bt[c];
                }
            }
        }
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// `[batch, ...]` -> `[batch, rest]`
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let batch = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(input, &[batch, rest])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    /// Element-wise mean of same-shape tensors.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("mean of an empty list"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![T::zero(); self.value(first).len()];
        for &v in inputs {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "mean operands have shapes {shape:?} and {:?}",
                    t.shape()
                )));
            }
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += x;
            }
        }
        let inv = T::one() / T::of(inputs.len() as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let value = Tensor::from_vec(shape, acc)?;
        Ok(self.push(value, Op::Mean(inputs.to_vec())))
    }

    /// Propagates d(loss)/d(node) back to every tracked leaf, adding into any
    /// gradient already held by the leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss does not depend on any tracked tensor".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let leaf = &mut self.nodes[id];
                match &mut leaf.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut give = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[id].value.data();

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let xs = nodes[input.0].value.shape();
                let ks = nodes[kernel.0].value.shape();
                let dims = conv::ConvDims {
                    batch: xs[0],
                    in_ch: xs[1],
                    out_ch: ks[0],
                    h: xs[2],
                    w: xs[3],
                };
                let want = [wants(*input), wants(*kernel), bias.is_some_and(wants)];
                let cg = conv::backward(val(*input), val(*kernel), g, &dims, want);
                if let Some(d) = cg.input {
                    give(*input, d);
                }
                if let Some(d) = cg.kernel {
                    give(*kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    give(*b, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); nodes[input.0].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src as usize] += gv;
                }
                give(*input, d);
            }
            Op::Relu(a) => {
                let d = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                give(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = out.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                give(*a, d);
            }
            Op::Tanh(a) => {
                let d = out.iter().zip(g).map(|(&y, &gv)| gv * (T::one() - y * y)).collect();
                give(*a, d);
            }
            Op::OneMinus(a) => give(*a, g.iter().map(|&v| -v).collect()),
            Op::Add(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    give(*a, val(*b).iter().zip(g).map(|(&y, &gv)| y * gv).collect());
                }
                if wants(*b) {
                    give(*b, val(*a).iter().zip(g).map(|(&x, &gv)| x * gv).collect());
                }
            }
            Op::Dense { input, weight, bias } => {
                let xs = nodes[input.0].value.shape();
                let (batch, n) = (xs[0], xs[1]);
                let m = nodes[weight.0].value.shape()[0];
                let gm = MatRef::row_major(g, batch, m);
                if wants(*input) {
                    let mut d = vec![T::zero(); batch * n];
                    gemm(gm, MatRef::row_major(val(*weight), m, n), T::zero(), &mut d);
                    give(*input, d);
                }
                if wants(*weight) {
                    let mut d = vec![T::zero(); m * n];
                    gemm(gm.t(), MatRef::row_major(val(*input), batch, n), T::zero(), &mut d);
                    give(*weight, d);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let mut d = vec![T::zero(); m];
                    for row in g.chunks_exact(m) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    give(b, d);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in d.chunks_exact_mut(k).zip(targets) {
                    row[t] -= scale;
                }
                give(*logits, d);
            }
            Op::Dropout { input, scale } => {
                give(*input, g.iter().zip(scale).map(|(&gv, &s)| gv * s).collect());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let s = nodes[input.0].value.shape();
                let (batch, ch) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let gam = val(*gamma);
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * hw;
                        for i in off..off + hw {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if wants(*input) {
                    let mut d = vec![T::zero(); g.len()];
                    let count = T::of((batch * hw) as f64);
                    for c in 0..ch {
                        let k = gam[c] * inv_std[c];
                        // sums of dxhat and dxhat*xhat are gamma-scaled dbeta/dgamma
                        let (sum_d, sum_dx) = (dbeta[c] * gam[c], dgamma[c] * gam[c]);
                        for b in 0..batch {
                            let off = (b * ch + c) * hw;
                            for i in off..off + hw {
                                d[i] = if *training {
                                    inv_std[c] * (count * g[i] * gam[c] - sum_d - xhat[i] * sum_dx) / count
                                } else {
                                    g[i] * k
                                };
                            }
                        }
                    }
                    give(*input, d);
                }
                give(*gamma, dgamma);
                give(*beta, dbeta);
            }
            Op::Reshape(a) => give(*a, g.to_vec()),
            Op::Sum(a) => give(*a, vec![g[0]; nodes[a.0].value.len()]),
            Op::Mean(vs) => {
                let inv = T::one() / T::of(vs.len() as f64);
                let d: Vec<T> = g.iter().map(|&v| v * inv).collect();
                for &v in vs {
                    give(v, d.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
