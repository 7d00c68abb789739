use super::kernels;
use super::ops::{self, AddKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { pad: usize },
    Add,
    Mul,
    Relu,
    Reshape(Vec<usize>),
    Mean,
    Sum,
    Softmax,
    CrossEntropy(Vec<usize>),
    Log,
    Neg,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, pad: usize },
    Add(Var, Var, AddKind),
    Mul(Var, Var),
    Relu(Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    EnsembleNll { logits: Vec<Var>, labels: Vec<usize>, probs: Vec<Tensor> },
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    MeanPool2(Var),
    /// Standardization by batch statistics; `floored[c]` marks channels whose
    /// variance hit the floor and so carry no gradient through the spread.
    BatchStandardize { input: Var, denom: Vec<f64>, floored: Vec<bool> },
    /// Standardization by fixed statistics.
    Standardize { input: Var, denom: Vec<f64> },
    ChannelAffine { input: Var, gamma: Var, beta: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in execution order,
/// which is a valid topological order; [`Graph::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Removes a node's tensor (with its gradient, if computed) from the graph.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point over [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Conv2d { .. } | OpKind::Add | OpKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::ShapeMismatch {
                op: "apply",
                detail: format!("{kind:?} takes {arity} inputs, got {}", inputs.len()),
            });
        }
        let a = inputs[0];
        match kind {
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Conv2d { pad } => self.conv2d(a, inputs[1], pad),
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::Relu => Ok(self.relu(a)),
            OpKind::Reshape(shape) => self.reshape(a, &shape),
            OpKind::Mean => self.mean(a),
            OpKind::Sum => self.sum(a),
            OpKind::Softmax => self.softmax(a),
            OpKind::CrossEntropy(labels) => self.cross_entropy(a, &labels),
            OpKind::Log => self.log(a),
            OpKind::Neg => Ok(self.neg(a)),
            OpKind::Scale(s) => self.scale(a, s),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), pad)?;
        let rg = self.rg(&[input, weight]);
        Ok(self.push(out, Op::Conv2d { input, weight, pad }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = ops::add_kind(self.value(a), self.value(b))?;
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b, kind), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = ops::mean(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = ops::sum(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Mean cross-entropy of integer `labels` against `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(loss, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Negative log of the ensemble-averaged class probability (log outside the mean).
    pub fn ensemble_nll(&mut self, logits: &[Var], labels: &[usize]) -> Result<Var> {
        let values: Vec<&Tensor> = logits.iter().map(|&v| self.value(v)).collect();
        let (loss, probs) = ops::ensemble_nll(&values, labels)?;
        let rg = self.rg(logits);
        Ok(self.push(loss, Op::EnsembleNll { logits: logits.to_vec(), labels: labels.to_vec(), probs }, rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = ops::log(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = ops::neg(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = ops::scale(self.value(a), s)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn mean_pool2(&mut self, a: Var) -> Result<Var> {
        let out = ops::mean_pool2(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanPool2(a), rg))
    }

    /// Standardizes each channel by its batch mean and biased variance, with
    /// the variance floored at `eps`. Returns the output and the batch
    /// `(mean, biased variance)` per channel.
    pub fn batch_standardize(&mut self, input: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let x = self.value(input);
        let (n, c, spatial) = ops::channel_layout(x)?;
        if n * spatial < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let (mean, m2) = kernels::channel_moments(x.data(), n, c, spatial);
        let var: Vec<f64> = m2.iter().map(|s| s / (n * spatial) as f64).collect();
        let floored: Vec<bool> = var.iter().map(|&v| v < eps).collect();
        let denom: Vec<f64> = var.iter().map(|&v| v.max(eps).sqrt()).collect();
        let out = ops::normalize_channels(x, &mean, &denom)?;
        let rg = self.rg(&[input]);
        let v = self.push(out, Op::BatchStandardize { input, denom, floored }, rg);
        Ok((v, mean, var))
    }

    /// Standardizes each channel by fixed statistics: `(x - mean) / denom`.
    pub fn standardize(&mut self, input: Var, mean: &[f64], denom: &[f64]) -> Result<Var> {
        let out = ops::normalize_channels(self.value(input), mean, denom)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Standardize { input, denom: denom.to_vec() }, rg))
    }

    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = ops::channel_affine(self.value(input), self.value(gamma).data(), self.value(beta).data())?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(out, Op::ChannelAffine { input, gamma, beta }, rg))
    }

    /// Smallest `|input|` over all ReLU nodes: how far the recorded point is
    /// from the nearest kink. `None` without ReLUs.
    pub fn min_relu_input_magnitude(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every node that
    /// requires a gradient holds `∂loss/∂node` in its tensor's grad buffer.
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let len = node.value.len();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; len])));
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contribution: Vec<f64>| {
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, gout, bv.data(), &mut ga);
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(m, k, n, av.data(), gout, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Conv2d { input, weight, pad } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let g = ops::conv_geometry(x, w, *pad)?;
                let (nb, o) = (x.shape()[0], w.shape()[0]);
                let plane = g.out_h() * g.out_w();
                let in_len = g.channels * g.height * g.width;
                let pl = g.patch_len();
                let (want_x, want_w) = (self.wants(*input), self.wants(*weight));
                let mut cols = vec![0.0; pl * plane];
                let mut dcols = vec![0.0; pl * plane];
                let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
                for b in 0..nb {
                    let gslice = &gout[b * o * plane..(b + 1) * o * plane];
                    if want_w {
                        kernels::im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                        kernels::gemm_nt(o, plane, pl, gslice, &cols, &mut gw);
                    }
                    if want_x {
                        dcols.fill(0.0);
                        kernels::gemm_tn(o, pl, plane, w.data(), gslice, &mut dcols);
                        kernels::col2im(&g, &dcols, &mut gx[b * in_len..(b + 1) * in_len]);
                    }
                }
                if want_x {
                    acc(*input, gx);
                }
                if want_w {
                    acc(*weight, gw);
                }
            }
            Op::Add(a, b, kind) => {
                if self.wants(*a) {
                    acc(*a, gout.to_vec());
                }
                if self.wants(*b) {
                    match kind {
                        AddKind::Same => acc(*b, gout.to_vec()),
                        AddKind::ChannelBias { channels, spatial } => {
                            let mut gb = vec![0.0; *channels];
                            for (i, chunk) in gout.chunks(*spatial).enumerate() {
                                gb[i % channels] += kernels::sum(chunk);
                            }
                            acc(*b, gb);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, gout.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect());
                }
                if self.wants(*b) {
                    acc(*b, gout.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect());
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, gout.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect());
            }
            Op::Reshape(a) => acc(*a, gout.to_vec()),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![gout[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![gout[0]; n]);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let k = s.shape()[1];
                let mut ga = vec![0.0; s.len()];
                for (i, row) in s.data().chunks(k).enumerate() {
                    let gr = &gout[i * k..(i + 1) * k];
                    let inner = kernels::dot(gr, row);
                    for j in 0..k {
                        ga[i * k + j] = row[j] * (gr[j] - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                acc(*logits, nll_grad(probs, labels, gout[0] / labels.len() as f64, 1.0));
            }
            Op::EnsembleNll { logits, labels, probs } => {
                let k = probs[0].shape()[1];
                let scale = gout[0] / labels.len() as f64;
                // Per-example share of each member in the ensemble probability.
                let totals: Vec<f64> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| probs.iter().map(|p| p.data()[i * k + y]).sum())
                    .collect();
                for (v, p) in logits.iter().zip(probs) {
                    if !self.wants(*v) {
                        continue;
                    }
                    let mut g = vec![0.0; p.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        let w = p.data()[i * k + y] / totals[i];
                        let row = &p.data()[i * k..(i + 1) * k];
                        for j in 0..k {
                            let target = if j == y { 1.0 } else { 0.0 };
                            g[i * k + j] = (row[j] - target) * (w * scale);
                        }
                    }
                    acc(*v, g);
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, gout.iter().zip(x).map(|(g, v)| g / v).collect());
            }
            Op::Neg(a) => acc(*a, gout.iter().map(|g| -g).collect()),
            Op::Scale(a, s) => acc(*a, gout.iter().map(|g| g * s).collect()),
            Op::MeanPool2(a) => {
                let s = self.value(*a).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let g = 0.25 * gout[p * oh * ow + y * ow + x];
                            let base = p * h * w;
                            ga[base + 2 * y * w + 2 * x] = g;
                            ga[base + 2 * y * w + 2 * x + 1] = g;
                            ga[base + (2 * y + 1) * w + 2 * x] = g;
                            ga[base + (2 * y + 1) * w + 2 * x + 1] = g;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::BatchStandardize { input, denom, floored } => {
                let xhat = &node.value;
                let (n, c, spatial) = ops::channel_layout(xhat)?;
                let count = (n * spatial) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gc, xc)) in gout.chunks(spatial).zip(xhat.data().chunks(spatial)).enumerate() {
                    sum_g[i % c] += kernels::sum(gc);
                    sum_gx[i % c] += kernels::dot(gc, xc);
                }
                let mut gx = vec![0.0; xhat.len()];
                for (i, ((dst, gc), xc)) in
                    gx.chunks_mut(spatial).zip(gout.chunks(spatial)).zip(xhat.data().chunks(spatial)).enumerate()
                {
                    let ch = i % c;
                    let mg = sum_g[ch] / count;
                    let mgx = if floored[ch] { 0.0 } else { sum_gx[ch] / count };
                    let d = denom[ch];
                    for ((o, &g), &xh) in dst.iter_mut().zip(gc).zip(xc) {
                        *o = (g - mg - xh * mgx) / d;
                    }
                }
                acc(*input, gx);
            }
            Op::Standardize { input, denom } => {
                let (_, c, spatial) = ops::channel_layout(&node.value)?;
                let mut gx = gout.to_vec();
                for (i, chunk) in gx.chunks_mut(spatial).enumerate() {
                    let d = denom[i % c];
                    chunk.iter_mut().for_each(|g| *g /= d);
                }
                acc(*input, gx);
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = self.value(*input);
                let gam = self.value(*gamma).data();
                let (_, c, spatial) = ops::channel_layout(x)?;
                if self.wants(*input) {
                    let mut gx = gout.to_vec();
                    for (i, chunk) in gx.chunks_mut(spatial).enumerate() {
                        let gm = gam[i % c];
                        chunk.iter_mut().for_each(|g| *g *= gm);
                    }
                    acc(*input, gx);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (i, (gc, xc)) in gout.chunks(spatial).zip(x.data().chunks(spatial)).enumerate() {
                        gg[i % c] += kernels::dot(gc, xc);
                    }
                    acc(*gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; c];
                    for (i, gc) in gout.chunks(spatial).enumerate() {
                        gb[i % c] += kernels::sum(gc);
                    }
                    acc(*beta, gb);
                }
            }
        }
        Ok(())
    }
}

/// Gradient of a (weighted) negative log-likelihood with respect to logits:
/// `(softmax - onehot) * (weight * scale)`.
fn nll_grad(probs: &Tensor, labels: &[usize], scale: f64, weight: f64) -> Vec<f64> {
    let k = probs.shape()[1];
    let mut g = vec![0.0; probs.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = &probs.data()[i * k..(i + 1) * k];
        for j in 0..k {
            let target = if j == y { 1.0 } else { 0.0 };
            g[i * k + j] = (row[j] - target) * (weight * scale);
        }
    }
    g
}
