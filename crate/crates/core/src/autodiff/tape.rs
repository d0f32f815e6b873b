//! Define-by-run tape over tensor-valued primitive ops.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{finish, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    Sigmoid,
    GlobalAvgPool,
    Add,
    Mul,
    OneMinus,
    Concat,
    Upsample2x,
    Linear,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::GlobalAvgPool,
        OpKind::Add,
        OpKind::Mul,
        OpKind::OneMinus,
        OpKind::Concat,
        OpKind::Upsample2x,
        OpKind::Linear,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "broadcast_add",
            OpKind::Mul => "elementwise_mul",
            OpKind::OneMinus => "one_minus",
            OpKind::Concat => "concat_channels",
            OpKind::Upsample2x => "nearest_upsample2x",
            OpKind::Linear => "fully_connected",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupt the backward rule of one op kind on the calling thread (its input
/// gradients are scaled by 1.5). Used as a negative control for the
/// gradient-check suite.
pub fn inject_backward_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

fn faulty(kind: OpKind) -> bool {
    FAULT.with(|f| f.get()) == Some(kind)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        // Batch statistics depend on the input; running statistics do not.
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Concat(Var, Var),
    Upsample2x(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::OneMinus(_) => OpKind::OneMinus,
            Op::Concat(..) => OpKind::Concat,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu(x) | Op::Sigmoid(x) | Op::GlobalAvgPool(x) | Op::OneMinus(x) | Op::Upsample2x(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive ops. Nodes are appended in execution order,
/// so every node's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sum_to_pooled(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            out.push(t.plane(n, c).iter().sum());
        }
    }
    Tensor::from_kernel(Shape::new(s.n, s.c, 1, 1), out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Conv geometry `(stride, padding)` of a conv node.
    pub fn conv_geometry(&self, v: Var) -> Option<(usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Conv2d { stride, padding, .. } => Some((*stride, *padding)),
            _ => None,
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(&[input, kernel])?;
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let k = self.shape(kernel);
        if k.h != k.w {
            return Err(Error::dim("conv2d", format!("non-square kernel {k}")));
        }
        let bias_data = match bias {
            Some(b) => {
                self.check(&[b])?;
                let bs = self.shape(b);
                if bs.numel() != k.n {
                    return Err(Error::dim("conv2d", format!("bias {bs} for kernel {k}")));
                }
                Some(self.value(b).data().to_vec())
            }
            None => None,
        };
        let out = kernels::conv2d_raw(&geom, self.value(input).data(), self.value(kernel).data(), bias_data.as_deref());
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            out,
        ))
    }

    fn bn_check(&self, input: Var, gamma: Var, beta: Var) -> Result<usize> {
        self.check(&[input, gamma, beta])?;
        let c = self.shape(input).c;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input {} with gamma {} and beta {}",
                    self.shape(input),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(c)
    }

    fn push_bn(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64, batch_stats: bool) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let ones = vec![1.0; s.c];
        let zeros = vec![0.0; s.c];
        let xhat = kernels::normalize(x, mean, var, &ones, &zeros, eps);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = kernels::normalize(x, mean, var, self.value(gamma).data(), self.value(beta).data(), eps);
        self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            out,
        )
    }

    /// Batch norm with batch statistics. Returns the output and the batch
    /// mean and biased variance so the caller can update running statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.bn_check(input, gamma, beta)?;
        let s = self.shape(input);
        if s.n * s.spatial() < 2 {
            return Err(Error::dim("batch_norm", format!("train mode needs N·H·W ≥ 2, input is {s}")));
        }
        let (mean, var) = kernels::channel_stats(self.value(input));
        let v = self.push_bn(input, gamma, beta, &mean, &var, eps, true);
        Ok((v, mean, var))
    }

    /// Batch norm with fixed (running) statistics; they are not differentiated.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let c = self.bn_check(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", format!("running statistics of length {} for {c} channels", mean.len())));
        }
        Ok(self.push_bn(input, gamma, beta, mean, var, eps, false))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernels::activation(self.value(x), kernels::Activation::Relu);
        Ok(self.push(Op::Relu(x), out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernels::activation(self.value(x), kernels::Activation::Sigmoid);
        Ok(self.push(Op::Sigmoid(x), out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernels::global_avg_pool(self.value(x));
        Ok(self.push(Op::GlobalAvgPool(x), out))
    }

    /// Broadcasting sum; either operand may be `N×C×1×1`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = kernels::broadcast_add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Broadcasting Hadamard product; either operand may be `N×C×1×1`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = kernels::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernels::one_minus(self.value(x));
        Ok(self.push(Op::OneMinus(x), out))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), out))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = kernels::nearest_upsample2x(self.value(x));
        Ok(self.push(Op::Upsample2x(x), out))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(&[input, weight])?;
        let b = match bias {
            Some(b) => {
                self.check(&[b])?;
                Some(self.value(b).data().to_vec())
            }
            None => None,
        };
        let out = kernels::fully_connected(self.value(input), self.value(weight), b.as_deref())?;
        Ok(self.push(Op::Linear { input, weight, bias }, out))
    }

    /// Mean cross-entropy as a `1×1×1×1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let loss = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let probs = kernels::softmax_channels(self.value(logits));
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            Tensor::from_kernel(Shape::new(1, 1, 1, 1), vec![loss]),
        ))
    }

    /// Reverse sweep from `output` seeded with `seed`. Nodes are visited in
    /// exact reverse order; gradients accumulate additively at fan-out.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass was recorded".into()));
        }
        self.node(output)?;
        if seed.shape() != self.shape(output) {
            return Err(Error::dim(
                "backward",
                format!("seed {} for output {}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(dy);
                continue;
            }
            let contributions = self.node_backward(node, &dy)?;
            let corrupt = faulty(node.op.kind());
            for (v, mut g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if corrupt {
                    g = g.map(|x| 1.5 * x);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// `backward` from a scalar node with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients> {
        self.backward(loss, &Tensor::ones(Shape::new(1, 1, 1, 1)))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let geom = ConvGeom::new(x.shape(), k.shape(), *stride, *padding)?;
                if self.wants(*input) {
                    out.push((*input, kernels::conv2d_grad_input(&geom, k.data(), dy.data())));
                }
                if self.wants(*kernel) {
                    let dk = kernels::conv2d_grad_kernel(&geom, x.data(), dy.data());
                    out.push((*kernel, Tensor::new(k.shape(), dk)?));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let pooled = sum_to_pooled(dy);
                        let s = dy.shape();
                        let mut db = vec![0.0; s.c];
                        for n in 0..s.n {
                            for (c, acc) in db.iter_mut().enumerate() {
                                *acc += pooled.at(n, c, 0, 0);
                            }
                        }
                        out.push((*b, Tensor::new(self.shape(*b), finish(db))?));
                    }
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
                let s = dy.shape();
                let hw = s.spatial();
                let m = (s.n * hw) as f64;
                let mut sum_dy = vec![0.0; s.c];
                let mut sum_dy_xhat = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for (d, xh) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            sum_dy[c] += d;
                            sum_dy_xhat[c] += d * xh;
                        }
                    }
                }
                let g = self.value(*gamma).data();
                if self.wants(*input) {
                    let mut dx = vec![0.0; s.numel()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let dst = &mut dx[(n * s.c + c) * hw..][..hw];
                            let (dyp, xhp) = (dy.plane(n, c), xhat.plane(n, c));
                            if *batch_stats {
                                let scale = g[c] * inv_std[c] / m;
                                for i in 0..hw {
                                    dst[i] = scale * (m * dyp[i] - sum_dy[c] - xhp[i] * sum_dy_xhat[c]);
                                }
                            } else {
                                let scale = g[c] * inv_std[c];
                                for i in 0..hw {
                                    dst[i] = scale * dyp[i];
                                }
                            }
                        }
                    }
                    out.push((*input, Tensor::from_kernel(s, dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::new(self.shape(*gamma), finish(sum_dy_xhat))?));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::new(self.shape(*beta), finish(sum_dy))?));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::from_kernel(dy.shape(), d)));
            }
            Op::Sigmoid(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                out.push((*x, Tensor::from_kernel(dy.shape(), d)));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s.spatial() as f64;
                let d = Tensor::from_fn(s, |n, c, _, _| dy.at(n, c, 0, 0) / hw);
                out.push((*x, Tensor::from_kernel(s, d.into_data())));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let g = if self.shape(v) == dy.shape() {
                            dy.clone()
                        } else {
                            sum_to_pooled(dy)
                        };
                        out.push((v, g));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let prod = kernels::elementwise_mul(dy, self.value(other))?;
                        let g = if self.shape(v) == prod.shape() {
                            prod
                        } else {
                            sum_to_pooled(&prod)
                        };
                        out.push((v, g));
                    }
                }
            }
            Op::OneMinus(x) => out.push((*x, dy.map(|g| -g))),
            Op::Concat(a, b) => {
                let ca = self.shape(*a).c;
                let cb = self.shape(*b).c;
                if self.wants(*a) {
                    out.push((*a, dy.slice_channels(0, ca)?));
                }
                if self.wants(*b) {
                    out.push((*b, dy.slice_channels(ca, ca + cb)?));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let d = Tensor::from_fn(s, |n, c, h, w| {
                    dy.at(n, c, 2 * h, 2 * w)
                        + dy.at(n, c, 2 * h, 2 * w + 1)
                        + dy.at(n, c, 2 * h + 1, 2 * w)
                        + dy.at(n, c, 2 * h + 1, 2 * w + 1)
                });
                out.push((*x, Tensor::from_kernel(s, d.into_data())));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (xs, ws) = (x.shape(), w.shape());
                if self.wants(*input) {
                    // dx (N×C_in) = dy (N×C_out) · W
                    let mut dx = vec![0.0; xs.numel()];
                    kernels::gemm(xs.n, ws.n, ws.c, dy.data(), (ws.n, 1), w.data(), (ws.c, 1), &mut dx);
                    out.push((*input, Tensor::from_kernel(xs, dx)));
                }
                if self.wants(*weight) {
                    // dW (C_out×C_in) = dyᵀ · x
                    let mut dw = vec![0.0; ws.numel()];
                    kernels::gemm(ws.n, xs.n, ws.c, dy.data(), (1, ws.n), x.data(), (xs.c, 1), &mut dw);
                    out.push((*weight, Tensor::from_kernel(ws, dw)));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; ws.n];
                        for row in dy.data().chunks(ws.n) {
                            for (acc, g) in db.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        out.push((*b, Tensor::new(self.shape(*b), finish(db))?));
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let s = probs.shape();
                let hw = s.spatial();
                let scale = dy.data()[0] / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for n in 0..s.n {
                    for p in 0..hw {
                        d[(n * s.c + labels[n * hw + p]) * hw + p] -= 1.0;
                    }
                }
                for v in &mut d {
                    *v *= scale;
                }
                out.push((*logits, Tensor::from_kernel(s, d)));
            }
        }
        Ok(out)
    }
}
