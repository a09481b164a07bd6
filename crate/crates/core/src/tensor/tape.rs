//! Reverse-mode autodiff over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. `backward` walks the tape in reverse once.
//! Nodes are never mutated after creation.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

/// Deliberate backward-pass corruption, used to prove the gradient checker
/// catches broken kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ConvBackward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (gradient flows through mean/var).
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    Mean(Vec<Var>),
    Maximum(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    AnchorRows {
        input: Var,
        depth: usize,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<Option<usize>>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        rows: Vec<bool>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Scale(..) => "mul_scalar",
            Op::Mean(_) => "mean_of_list",
            Op::Maximum(..) => "maximum",
            Op::Concat { .. } => "concat",
            Op::AnchorRows { .. } => "anchor_rows",
            Op::Dot { .. } => "dot",
            Op::SigmoidBce { .. } => "sigmoid_bce",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::contract(op, format!("shape {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.grad = None;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf for a named parameter, created at most once per tape so that
    /// repeated uses share one node and their gradients accumulate.
    pub fn param_leaf(&mut self, key: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(key, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::contract(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract("conv2d", format!("even kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::contract(
                "conv2d",
                format!("input {h}x{w} with padding {padding} smaller than kernel {kh}x{kw}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::contract(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[n, cout, geom.out_h(), geom.out_w()], out)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// Batch normalisation over `(N, H, W)` per channel. In train mode the
    /// batch statistics are used and `stats` is updated with `cfg.momentum`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        cfg: BnConfig,
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if !(cfg.eps > 0.0) {
            return Err(Error::contract("batchnorm2d", "eps must be > 0"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::contract("batchnorm2d", "gamma/beta must have shape [C]"));
        }
        if stats.running_mean.len() != c || stats.running_var.len() != c {
            return Err(Error::contract("batchnorm2d", "running stats channel mismatch"));
        }
        let plane = h * w;
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Train => {
                let m = n * plane;
                if m < 2 {
                    return Err(Error::contract(
                        "batchnorm2d",
                        "train mode needs N*H*W >= 2",
                    ));
                }
                let (mean, var) = kernels::channel_stats(self.value(input).data(), n, c, plane);
                let mom = cfg.momentum;
                let unbias = m as f64 / (m as f64 - 1.0);
                for ch in 0..c {
                    let rm = stats.running_mean[ch].as_f64();
                    let rv = stats.running_var[ch].as_f64();
                    stats.running_mean[ch] = T::from_f64_lossy((1.0 - mom) * rm + mom * mean[ch]);
                    stats.running_var[ch] =
                        T::from_f64_lossy((1.0 - mom) * rv + mom * var[ch] * unbias);
                }
                let mean: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
                let inv: Vec<T> = var
                    .iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v + cfg.eps).sqrt()))
                    .collect();
                (mean, inv, true)
            }
            Mode::Eval => {
                let inv = stats
                    .running_var
                    .iter()
                    .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + cfg.eps).sqrt()))
                    .collect();
                (stats.running_mean.clone(), inv, false)
            }
        };
        let (out, xhat) = kernels::normalize_affine(
            self.value(input).data(),
            n,
            c,
            plane,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let value = self.value(a).map(|v| v * s);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    /// `(1/k) * sum(xs)`.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("mean_of_list", "empty list"))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![T::zero(); self.value(first).len()];
        for &x in xs {
            same_shape("mean_of_list", &shape, self.value(x).shape())?;
            acc.iter_mut()
                .zip(self.value(x).data())
                .for_each(|(a, &v)| *a += v);
        }
        let k = T::from_f64_lossy(xs.len() as f64);
        acc.iter_mut().for_each(|a| *a = *a / k);
        let value = Tensor::from_vec(&shape, acc)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(value, Op::Mean(xs.to_vec()), needs))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("maximum", self.value(a).shape(), self.value(b).shape())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Maximum(a, b), needs))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat", "empty list"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::contract("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::contract(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).dims4()?;
        let sb = self.value(b).dims4()?;
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::contract(
                "concat_channels",
                format!("batch/spatial mismatch {sa:?} vs {sb:?}"),
            ));
        }
        self.concat(&[a, b], 1)
    }

    /// Rearrange a head output `[N, A*D, H, W]` into per-anchor rows
    /// `[N, H*W*A, D]`, anchors ordered by cell (row-major) then slot.
    pub fn anchor_rows(&mut self, input: Var, depth: usize) -> Result<Var> {
        let [n, ch, h, w] = self.value(input).dims4()?;
        if depth == 0 || ch % depth != 0 {
            return Err(Error::contract(
                "anchor_rows",
                format!("{ch} channels not divisible by depth {depth}"),
            ));
        }
        let a = ch / depth;
        let src = self.value(input).data();
        let mut data = vec![T::zero(); src.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for s in 0..a {
                        for d in 0..depth {
                            let row = (y * w + x) * a + s;
                            data[(b * h * w * a + row) * depth + d] =
                                src[((b * ch + s * depth + d) * h + y) * w + x];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, h * w * a, depth], data)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::AnchorRows { input, depth }, needs))
    }

    /// `sum(input * weights)` as a scalar.
    pub fn dot(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(Error::contract("dot", "weight length mismatch"));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x.as_f64() * w.as_f64())
            .sum::<f64>();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(s)),
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let ones = vec![T::one(); self.value(input).len()];
        self.dot(input, &ones).expect("matching length")
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.len() {
            return Err(Error::contract("sigmoid_bce", "target length mismatch"));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::contract("sigmoid_bce", "targets must be 0 or 1"));
        }
        let loss = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &t)| kernels::bce_with_logit(l.as_f64(), t.as_f64()))
            .sum::<f64>()
            / x.len() as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over the rows that carry a label. The last
    /// axis of `logits` holds the classes. No labelled rows gives 0.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        let k = *x.shape().last().expect("rank >= 1");
        let rows = x.len() / k;
        if labels.len() != rows {
            return Err(Error::contract(
                "softmax_ce",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, label) in labels.iter().enumerate() {
            let Some(l) = *label else { continue };
            if l >= k {
                return Err(Error::contract(
                    "softmax_ce",
                    format!("label {l} out of range for {k} classes"),
                ));
            }
            let row: Vec<f64> = x.data()[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect();
            total += kernels::log_sum_exp(&row) - row[l];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Smooth-L1 summed over the last axis and averaged over selected rows.
    /// No selected rows gives 0.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], rows: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        let d = *p.shape().last().expect("rank >= 1");
        if target.len() != p.len() || rows.len() * d != p.len() {
            return Err(Error::contract("smooth_l1", "target/row mask size mismatch"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &sel) in rows.iter().enumerate() {
            if !sel {
                continue;
            }
            count += 1;
            let span = r * d..(r + 1) * d;
            for (&x, &t) in p.data()[span.clone()].iter().zip(&target[span]) {
                total += kernels::smooth_l1(x.as_f64() - t.as_f64());
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (node {idx}) at element {bad}",
                    node.op.name()
                )));
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    cols,
                    self.value(*weight).data(),
                    g,
                    (
                        self.needs(*input),
                        self.needs(*weight),
                        bias.is_some_and(|b| self.needs(b)),
                    ),
                );
                if let Some(mut gw) = cg.weight {
                    if self.fault == Some(Fault::ConvBackward) {
                        gw.iter_mut().for_each(|v| *v *= T::from_f64_lossy(1.1));
                    }
                    send(*weight, gw);
                }
                if let Some(gi) = cg.input {
                    send(*input, gi);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    send(*b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let m = (n * plane) as f64;
                let gamma_v = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += g[i].as_f64();
                            sum_gx[ch] += g[i].as_f64() * xhat[i].as_f64();
                        }
                    }
                }
                if self.needs(*input) {
                    let mut gi = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = gamma_v[ch].as_f64() * inv_std[ch].as_f64();
                            for i in off..off + plane {
                                let v = if *batch_stats {
                                    scale
                                        * (g[i].as_f64()
                                            - sum_g[ch] / m
                                            - xhat[i].as_f64() * sum_gx[ch] / m)
                                } else {
                                    scale * g[i].as_f64()
                                };
                                gi[i] = T::from_f64_lossy(v);
                            }
                        }
                    }
                    send(*input, gi);
                }
                send(*gamma, sum_gx.iter().map(|&v| T::from_f64_lossy(v)).collect());
                send(*beta, sum_g.iter().map(|&v| T::from_f64_lossy(v)).collect());
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*x, gx);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&v| v * *s).collect()),
            Op::Mean(xs) => {
                let k = T::from_f64_lossy(xs.len() as f64);
                let gx: Vec<T> = g.iter().map(|&v| v / k).collect();
                for &x in xs {
                    send(x, gx.clone());
                }
            }
            Op::Maximum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![T::zero(); g.len()];
                let mut gb = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    if av[i] >= bv[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in inputs {
                    let ext = self.value(x).shape()[*axis];
                    let block = ext * inner;
                    let mut gx = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g[start..start + block]);
                    }
                    send(x, gx);
                    offset += ext;
                }
            }
            Op::AnchorRows { input, depth } => {
                let [n, ch, h, w] = self.value(*input).dims4().expect("rank 4");
                let a = ch / depth;
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            for s in 0..a {
                                for d in 0..*depth {
                                    let row = (y * w + x) * a + s;
                                    gx[((b * ch + s * depth + d) * h + y) * w + x] =
                                        g[(b * h * w * a + row) * depth + d];
                                }
                            }
                        }
                    }
                }
                send(*input, gx);
            }
            Op::Dot { input, weights } => {
                let g0 = g[0];
                send(*input, weights.iter().map(|&w| w * g0).collect());
            }
            Op::SigmoidBce { logits, targets } => {
                let x = self.value(*logits).data();
                let scale = g[0].as_f64() / x.len() as f64;
                let gx = x
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| {
                        T::from_f64_lossy((kernels::sigmoid(l.as_f64()) - t.as_f64()) * scale)
                    })
                    .collect();
                send(*logits, gx);
            }
            Op::SoftmaxCe { logits, labels } => {
                let x = self.value(*logits);
                let k = *x.shape().last().expect("rank >= 1");
                let count = labels.iter().filter(|l| l.is_some()).count();
                let mut gx = vec![T::zero(); x.len()];
                if count > 0 {
                    let scale = g[0].as_f64() / count as f64;
                    for (r, label) in labels.iter().enumerate() {
                        let Some(l) = *label else { continue };
                        let row: Vec<f64> =
                            x.data()[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect();
                        let lse = kernels::log_sum_exp(&row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gx[r * k + j] = T::from_f64_lossy((p - onehot) * scale);
                        }
                    }
                }
                send(*logits, gx);
            }
            Op::SmoothL1 { pred, target, rows } => {
                let p = self.value(*pred);
                let d = *p.shape().last().expect("rank >= 1");
                let count = rows.iter().filter(|&&r| r).count();
                let mut gx = vec![T::zero(); p.len()];
                if count > 0 {
                    let scale = g[0].as_f64() / count as f64;
                    for (r, &sel) in rows.iter().enumerate() {
                        if !sel {
                            continue;
                        }
                        for j in r * d..(r + 1) * d {
                            let diff = p.data()[j].as_f64() - target[j].as_f64();
                            gx[j] = T::from_f64_lossy(kernels::smooth_l1_grad(diff) * scale);
                        }
                    }
                }
                send(*pred, gx);
            }
        }
    }
}
