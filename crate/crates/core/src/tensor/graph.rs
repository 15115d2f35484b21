use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::gemm::{gemm, MatRef};
use super::ops::{self, dims2, dims4, RunningStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded tape of differentiable operations.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for back-propagation. A graph can be back-propagated
/// once; record a fresh graph for the next step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Fingerprint of the piecewise-linear branches taken on this tape:
    /// the sign pattern of every ReLU input and every max-pool winner. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for chunk in self.nodes[a.0].value.data().chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |b, (i, &v)| b | (u64::from(v > 0.0) << i));
                        bits.hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records a copy of `t` that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Cuts the tape: the result has `v`'s value but is a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.detached();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last back-propagated loss w.r.t. a leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * factor).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements (accumulated in f64).
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let n = t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar((s / n) as f32), Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), stride, padding)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Batch normalization; in training mode `stats` absorbs the batch
    /// statistics, in eval mode it supplies the normalization.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        let fwd = if training {
            if stats.channels() != g.numel() {
                return Err(Error::shape("batch_norm2d", g.shape(), &[stats.channels()]));
            }
            let (fwd, mean, var) = ops::bn_train_forward(x, g, b)?;
            ops::update_running_stats(stats, &mean, &var);
            fwd
        } else {
            ops::bn_eval_forward(x, g, b, stats)?
        };
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            fwd.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                training,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d_indexed(self.value(input), kernel, stride, padding)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(input), kernel, stride)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::AvgPool { input, kernel, stride }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let out = ops::softmax(self.value(logits))?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::Softmax(logits), rg))
    }

    /// Mean cross-entropy of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            rg,
        ))
    }

    fn send(&mut self, target: Var, g: Vec<f32>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates `d loss / d node` to every gradient-tracking node.
    ///
    /// Gradients of leaves stay readable through [`Graph::grad`]; gradients
    /// of intermediate nodes are released as soon as they have been pushed
    /// to their inputs.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &[f32]) -> Result<()> {
        let mut sends: Vec<(Var, Vec<f32>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sends.push((*a, dy.to_vec()));
                sends.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    sends.push((*a, dy.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if self.rg(*b) {
                    sends.push((*b, dy.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, f) => sends.push((*a, dy.iter().map(|g| g * f).collect())),
            Op::Sum(a) => sends.push((*a, vec![dy[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                sends.push((*a, vec![dy[0] / n.max(1) as f32; n]));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                sends.push((
                    *a,
                    dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                ));
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (dx, dw) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    dy,
                    *stride,
                    *padding,
                    self.rg(*input),
                    self.rg(*weight),
                )?;
                if let Some(dx) = dx {
                    sends.push((*input, dx));
                }
                if let Some(dw) = dw {
                    sends.push((*weight, dw));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (dx, dg, db) = ops::bn_backward(
                    self.value(*input).shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    dy,
                    *training,
                );
                sends.push((*input, dx));
                sends.push((*gamma, dg));
                sends.push((*beta, db));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                sends.push((*input, dx));
            }
            Op::AvgPool { input, kernel, stride } => {
                let dx = ops::avg_pool2d_backward(self.value(*input).shape(), *kernel, *stride, dy);
                sends.push((*input, dx));
            }
            Op::GlobalAvgPool(input) => {
                let (_, _, h, w) = dims4(self.value(*input), "global_avg_pool")?;
                let hw = h * w;
                let inv = 1.0 / hw as f32;
                let mut dx = Vec::with_capacity(dy.len() * hw);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                sends.push((*input, dx));
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let (n, total_c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            dp.extend_from_slice(&dy[start..start + pc * hw]);
                        }
                        sends.push((p, dp));
                    }
                    offset += pc;
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = dims2(self.value(*input), "linear")?;
                let k = self.value(*bias).numel();
                let dy_m = MatRef::row_major(dy, n, k);
                if self.rg(*input) {
                    let mut dx = vec![0.0f32; n * f];
                    gemm(
                        dy_m,
                        MatRef::transposed(self.value(*weight).data(), f, k),
                        &mut dx,
                        false,
                    );
                    sends.push((*input, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0f32; f * k];
                    gemm(
                        MatRef::transposed(self.value(*input).data(), n, f),
                        dy_m,
                        &mut dw,
                        false,
                    );
                    sends.push((*weight, dw));
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0f64; k];
                    for row in dy.chunks_exact(k) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g as f64);
                    }
                    sends.push((*bias, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Softmax(logits) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut dx = vec![0.0f32; y.len()];
                for ((dxr, yr), gr) in dx.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(dy.chunks_exact(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..k {
                        dxr[j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                sends.push((*logits, dx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = dy[0] / n as f32;
                let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= scale;
                }
                sends.push((*logits, dx));
            }
        }
        for (target, g) in sends {
            self.send(target, g);
        }
        Ok(())
    }
}
