use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Result, UbrError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation a node computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Conv2d,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    FullyConnected,
    Sigmoid,
    LogSigmoid,
    SmoothL1,
    Diff,
    Sum,
    Scale,
    Add,
    Reshape,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        geo: ConvGeometry,
    },
    Relu(NodeId),
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    FullyConnected {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    SmoothL1(NodeId),
    Diff(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Reshape(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Parameter => OpKind::Parameter,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LogSigmoid(_) => OpKind::LogSigmoid,
            Op::SmoothL1(_) => OpKind::SmoothL1,
            Op::Diff(_) => OpKind::Diff,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::Add(..) => OpKind::Add,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Constant | Op::Parameter => vec![],
            Op::Conv2d {
                input, kernels, bias, ..
            } => vec![input, kernels, bias],
            Op::FullyConnected {
                input,
                weights,
                bias,
            } => vec![input, weights, bias],
            Op::MaxPool2d { input, .. } => vec![input],
            Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::SmoothL1(x)
            | Op::Diff(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::Reshape(x) => vec![x],
            Op::Add(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Append-only computation graph. Nodes only reference earlier nodes, so the
/// graph is acyclic and insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(UbrError::ShapeMismatch {
            op,
            axis: "rank",
            expected: rank,
            actual: t.rank(),
        });
    }
    Ok(())
}

fn expect_extent(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(UbrError::ShapeMismatch {
            op,
            axis,
            expected,
            actual,
        });
    }
    Ok(())
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Parameter => true,
            _ => op.inputs().iter().any(|id| self.nodes[id.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is never computed (e.g. an input batch).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Leaf that receives a gradient during `backward`.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Parameter, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` output with respect to this node.
    /// `None` for nodes that do not depend on any parameter.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Fingerprint of every piecewise decision taken in the forward pass:
    /// ReLU activity, max-pool winners and smooth-L1 branches. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.nodes[x.0].value.data().iter().map(|&v| (v > 0.0) as u64)),
                Op::MaxPool2d { argmax, .. } => sig.extend(argmax.iter().map(|&i| i as u64)),
                Op::SmoothL1(x) => sig.extend(self.nodes[x.0].value.data().iter().map(|&v| (v.abs() < 1.0) as u64)),
                _ => {}
            }
        }
        sig
    }

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let k = self.value(kernels);
        let b = self.value(bias);
        expect_rank(OP, x, 4)?;
        expect_rank(OP, k, 4)?;
        expect_rank(OP, b, 1)?;
        if stride == 0 {
            return Err(UbrError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (xs, ks) = (x.shape(), k.shape());
        expect_extent(OP, "in_channels", ks[1], xs[1])?;
        expect_extent(OP, "bias", ks[0], b.shape()[0])?;
        if xs[2] + 2 * padding < ks[2] {
            return Err(UbrError::ShapeMismatch {
                op: OP,
                axis: "height",
                expected: ks[2],
                actual: xs[2] + 2 * padding,
            });
        }
        if xs[3] + 2 * padding < ks[3] {
            return Err(UbrError::ShapeMismatch {
                op: OP,
                axis: "width",
                expected: ks[3],
                actual: xs[3] + 2 * padding,
            });
        }
        let geo = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geo, x.data(), k.data(), b.data());
        let value = Tensor::new(vec![geo.batch, geo.out_channels, geo.out_h(), geo.out_w()], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                geo,
            },
            value,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(Op::Relu(input), value)
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        const OP: &str = "maxpool2d";
        let x = self.value(input);
        expect_rank(OP, x, 4)?;
        if window == 0 || stride == 0 {
            return Err(UbrError::InvalidArgument("max-pool window and stride must be positive".into()));
        }
        let s = x.shape();
        if s[2] < window {
            return Err(UbrError::ShapeMismatch {
                op: OP,
                axis: "height",
                expected: window,
                actual: s[2],
            });
        }
        if s[3] < window {
            return Err(UbrError::ShapeMismatch {
                op: OP,
                axis: "width",
                expected: window,
                actual: s[3],
            });
        }
        let (oh, ow) = ((s[2] - window) / stride + 1, (s[3] - window) / stride + 1);
        let (out, argmax) = kernels::maxpool_forward(s[0] * s[1], s[2], s[3], window, stride, x.data());
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { input, argmax }, value))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        expect_rank("global_avg_pool", x, 4)?;
        let s = x.shape();
        let area = s[2] * s[3];
        let out: Vec<f64> = x
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push(Op::GlobalAvgPool(input), value))
    }

    pub fn fully_connected(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        const OP: &str = "fully_connected";
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        expect_rank(OP, x, 2)?;
        expect_rank(OP, w, 2)?;
        expect_rank(OP, b, 1)?;
        let (batch, features) = (x.shape()[0], x.shape()[1]);
        expect_extent(OP, "features", w.shape()[0], features)?;
        let outputs = w.shape()[1];
        expect_extent(OP, "outputs", outputs, b.shape()[0])?;
        let mut out: Vec<f64> = (0..batch).flat_map(|_| b.data().iter().copied()).collect();
        kernels::gemm(batch, features, outputs, x.data(), false, w.data(), false, 1.0, &mut out);
        let value = Tensor::new(vec![batch, outputs], out)?;
        Ok(self.push(
            Op::FullyConnected {
                input,
                weights,
                bias,
            },
            value,
        ))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(kernels::sigmoid);
        self.push(Op::Sigmoid(input), value)
    }

    pub fn log_sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(kernels::log_sigmoid);
        self.push(Op::LogSigmoid(input), value)
    }

    pub fn smooth_l1(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(kernels::smooth_l1);
        self.push(Op::SmoothL1(input), value)
    }

    /// Adjacent differences along the last axis: `y[.., j] = x[.., j+1] − x[.., j]`.
    pub fn diff(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let last = *x.shape().last().unwrap();
        if last < 2 {
            return Err(UbrError::ShapeMismatch {
                op: "diff",
                axis: "last",
                expected: 2,
                actual: last,
            });
        }
        let out: Vec<f64> = x
            .data()
            .chunks_exact(last)
            .flat_map(|row| row.windows(2).map(|w| w[1] - w[0]))
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = last - 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Diff(input), value))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data().iter().sum();
        self.push(Op::Sum(input), Tensor::scalar(total))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        self.push(Op::Scale(input, factor), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(UbrError::InvalidShape {
                shape: y.shape().to_vec(),
                reason: format!("add expects shape {:?}", x.shape()),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(input), value))
    }

    /// Reverse pass from a scalar output. Gradients from any earlier call are
    /// discarded first.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let value = self.value(output);
        if !value.is_scalar() {
            return Err(UbrError::NonScalarOutput(value.shape().to_vec()));
        }
        self.backward_with_grad(output, Tensor::filled(value.shape().to_vec(), 1.0)?)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `output`.
    pub fn backward_with_grad(&mut self, output: NodeId, seed: Tensor) -> Result<()> {
        if seed.shape() != self.value(output).shape() {
            return Err(UbrError::InvalidShape {
                shape: seed.shape().to_vec(),
                reason: format!("seed gradient must match output shape {:?}", self.value(output).shape()),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.nodes[output.0].grad = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Constant);
            let result = self.propagate(&op, &grad);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(grad);
            result?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.add_assign(&grad),
            None => node.grad = Some(grad),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn elementwise_grad(&self, x: NodeId, grad: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().zip(grad.data()).map(|(&v, &g)| f(v, g)).collect();
        Tensor::new(xv.shape().to_vec(), data).expect("shape preserved")
    }

    fn propagate(&mut self, op: &Op, grad: &Tensor) -> Result<()> {
        match *op {
            Op::Constant | Op::Parameter => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geo,
            } => {
                let g = kernels::conv2d_backward(
                    &geo,
                    self.value(input).data(),
                    self.value(kernels).data(),
                    grad.data(),
                    self.needs(input),
                );
                if let Some(gi) = g.input {
                    let t = Tensor::new(self.value(input).shape().to_vec(), gi)?;
                    self.accumulate(input, t);
                }
                let gk = Tensor::new(self.value(kernels).shape().to_vec(), g.kernels)?;
                self.accumulate(kernels, gk);
                self.accumulate(bias, Tensor::new(vec![geo.out_channels], g.bias)?);
            }
            Op::Relu(x) => {
                let g = self.elementwise_grad(x, grad, |v, g| if v > 0.0 { g } else { 0.0 });
                self.accumulate(x, g);
            }
            Op::MaxPool2d { input, ref argmax } => {
                let mut g = Tensor::zeros_like(self.value(input));
                let data = g.data_mut();
                for (&src, &gv) in argmax.iter().zip(grad.data()) {
                    data[src] += gv;
                }
                self.accumulate(input, g);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(x);
                let area = xv.shape()[2] * xv.shape()[3];
                let data = grad
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
                    .collect();
                let g = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, g);
            }
            Op::FullyConnected {
                input,
                weights,
                bias,
            } => {
                let (batch, features) = (self.value(input).shape()[0], self.value(input).shape()[1]);
                let outputs = self.value(weights).shape()[1];
                if self.needs(input) {
                    let mut gi = vec![0.0; batch * features];
                    kernels::gemm(batch, outputs, features, grad.data(), false, self.value(weights).data(), true, 0.0, &mut gi);
                    self.accumulate(input, Tensor::new(vec![batch, features], gi)?);
                }
                let mut gw = vec![0.0; features * outputs];
                kernels::gemm(features, batch, outputs, self.value(input).data(), true, grad.data(), false, 0.0, &mut gw);
                self.accumulate(weights, Tensor::new(vec![features, outputs], gw)?);
                let mut gb = vec![0.0; outputs];
                for row in grad.data().chunks_exact(outputs) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                self.accumulate(bias, Tensor::new(vec![outputs], gb)?);
            }
            Op::Sigmoid(x) => {
                let g = self.elementwise_grad(x, grad, |v, g| {
                    let s = kernels::sigmoid(v);
                    g * s * (1.0 - s)
                });
                self.accumulate(x, g);
            }
            Op::LogSigmoid(x) => {
                // d/dx ln h(x) = 1 − h(x) = h(−x)
                let g = self.elementwise_grad(x, grad, |v, g| g * kernels::sigmoid(-v));
                self.accumulate(x, g);
            }
            Op::SmoothL1(x) => {
                let g = self.elementwise_grad(x, grad, |v, g| g * kernels::smooth_l1_grad(v));
                self.accumulate(x, g);
            }
            Op::Diff(x) => {
                let xv = self.value(x);
                let last = *xv.shape().last().unwrap();
                let mut g = Tensor::zeros_like(xv);
                for (dst, src) in g.data_mut().chunks_exact_mut(last).zip(grad.data().chunks_exact(last - 1)) {
                    for (j, &gv) in src.iter().enumerate() {
                        dst[j + 1] += gv;
                        dst[j] -= gv;
                    }
                }
                self.accumulate(x, g);
            }
            Op::Sum(x) => {
                let g = Tensor::filled(self.value(x).shape().to_vec(), grad.data()[0])?;
                self.accumulate(x, g);
            }
            Op::Scale(x, factor) => {
                let g = grad.map(|v| v * factor);
                self.accumulate(x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.clone());
            }
            Op::Reshape(x) => {
                let g = grad.clone().reshape(self.value(x).shape().to_vec())?;
                self.accumulate(x, g);
            }
        }
        Ok(())
    }
}
