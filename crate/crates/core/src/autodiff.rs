//! Reverse-mode differentiation over flat 1D arrays.
//!
//! A [`Graph`] is an ordered list of primitive operations. Every node's
//! operands precede it, so the forward pass is a single sweep and the
//! backward pass is the reverse sweep. Multi-channel signals are stored
//! channel-major (`[channel][position]`) in one flat buffer and the
//! convolution and pooling nodes carry their channel counts.
//!
//! Parameters and inputs are not owned by the graph: a graph only holds
//! slot indices, and the caller binds a parameter set and input arrays at
//! evaluation time. The same graph can therefore be evaluated against many
//! parameter snapshots.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A non-empty array of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Array1D(Vec<f64>);

impl Array1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("array must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "array entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "zero-length array");
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Array1D {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Array1D> for Vec<f64> {
    fn from(a: Array1D) -> Self {
        a.0
    }
}

impl std::ops::Deref for Array1D {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a learned 1D convolution (cross-correlation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let padded = input_len + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(usize),
    Param(usize),
    Constant(Arc<Vec<f64>>),
    /// Learned cross-correlation; weight layout `[out][in][k]`, bias `[out]`.
    Conv1d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        shape: ConvShape,
    },
    /// Same-length zero-padded convolution with fixed kernels, averaged
    /// over the kernel list. Each kernel must have odd length.
    KernelAverage {
        x: NodeId,
        kernels: Arc<Vec<Vec<f64>>>,
    },
    /// Adds `bias[c]` to every position of channel `c`.
    AddBias {
        x: NodeId,
        bias: NodeId,
        channels: usize,
    },
    Relu(NodeId),
    /// Non-overlapping max pooling per channel; trailing remainder dropped.
    MaxPool {
        x: NodeId,
        channels: usize,
        size: usize,
    },
    GlobalAvgPool {
        x: NodeId,
        channels: usize,
    },
    /// `y = W x + b` with `W` stored row-major `[outputs][inputs]`.
    Affine {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        outputs: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise `a / b`.
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxT {
        x: NodeId,
        temperature: f64,
    },
    /// `ln(max(x, floor))`.
    Log {
        x: NodeId,
        floor: f64,
    },
    /// `max(|x|, floor)`.
    AbsFloor {
        x: NodeId,
        floor: f64,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Scalar dot product with a constant vector.
    DotConst {
        x: NodeId,
        weights: Arc<Vec<f64>>,
    },
    Index {
        x: NodeId,
        index: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Conv1d { .. } => "conv1d",
            Op::KernelAverage { .. } => "kernel_average",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::SoftmaxT { .. } => "softmax_t",
            Op::Log { .. } => "log",
            Op::AbsFloor { .. } => "abs_floor",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::DotConst { .. } => "dot_const",
            Op::Index { .. } => "index",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    len: usize,
}

/// Ordered primitive operations over named parameter and input slots.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_lens: Vec<usize>,
    input_names: Vec<String>,
    input_lens: Vec<usize>,
}

fn shape_err(node: usize, op: &str, detail: String) -> Error {
    Error::Shape(format!("node {node} ({op}): {detail}"))
}

impl Graph {
    /// `param_lens[i]` is the length of parameter slot `i`.
    pub fn new(param_lens: Vec<usize>) -> Self {
        Self {
            nodes: Vec::new(),
            param_lens,
            input_names: Vec::new(),
            input_lens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn input(&mut self, name: &str, len: usize) -> NodeId {
        let slot = self.input_names.len();
        self.input_names.push(name.to_string());
        self.input_lens.push(len);
        self.push(Op::Input(slot), len)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        let len = self.param_lens[index];
        self.push(Op::Param(index), len)
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let len = values.len();
        self.push(Op::Constant(Arc::new(values)), len)
    }

    /// Appends an operation after validating operand shapes.
    pub fn op(&mut self, op: Op) -> Result<NodeId> {
        let idx = self.nodes.len();
        let name = op.name();
        let l = |n: NodeId| self.nodes[n.0].len;
        for operand in operands(&op) {
            if operand.0 >= idx {
                return Err(shape_err(idx, name, format!("operand {} does not precede node", operand.0)));
            }
        }
        let len = match &op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => {
                return Err(shape_err(idx, name, "leaf nodes are created with input/param/constant".into()))
            }
            Op::Conv1d { x, weight, bias, shape } => {
                if l(*x) % shape.in_channels != 0 {
                    return Err(shape_err(idx, name, format!("input length {} not divisible by {} channels", l(*x), shape.in_channels)));
                }
                if l(*weight) != shape.weight_len() {
                    return Err(shape_err(idx, name, format!("weight length {} != {}", l(*weight), shape.weight_len())));
                }
                if let Some(b) = bias {
                    if l(*b) != shape.out_channels {
                        return Err(shape_err(idx, name, format!("bias length {} != {}", l(*b), shape.out_channels)));
                    }
                }
                let per = l(*x) / shape.in_channels;
                let out = shape
                    .output_len(per)
                    .ok_or_else(|| shape_err(idx, name, format!("input length {per} too short for kernel {}", shape.kernel)))?;
                out * shape.out_channels
            }
            Op::KernelAverage { x, kernels } => {
                if kernels.is_empty() || kernels.iter().any(|k| k.len() % 2 == 0) {
                    return Err(shape_err(idx, name, "kernels must be non-empty with odd lengths".into()));
                }
                l(*x)
            }
            Op::AddBias { x, bias, channels } => {
                if *channels == 0 || l(*x) % channels != 0 || l(*bias) != *channels {
                    return Err(shape_err(idx, name, format!("bias {} / input {} / channels {channels}", l(*bias), l(*x))));
                }
                l(*x)
            }
            Op::Relu(x) => l(*x),
            Op::MaxPool { x, channels, size } => {
                if *channels == 0 || *size == 0 || l(*x) % channels != 0 || l(*x) / channels < *size {
                    return Err(shape_err(idx, name, format!("cannot pool length {} over {channels} channels by {size}", l(*x))));
                }
                (l(*x) / channels / size) * channels
            }
            Op::GlobalAvgPool { x, channels } => {
                if *channels == 0 || l(*x) % channels != 0 {
                    return Err(shape_err(idx, name, format!("length {} not divisible by {channels}", l(*x))));
                }
                *channels
            }
            Op::Affine { x, weight, bias, outputs } => {
                if l(*weight) != outputs * l(*x) || l(*bias) != *outputs {
                    return Err(shape_err(
                        idx,
                        name,
                        format!("weight {} bias {} for {} -> {outputs}", l(*weight), l(*bias), l(*x)),
                    ));
                }
                *outputs
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                if l(*a) != l(*b) {
                    return Err(shape_err(idx, name, format!("lengths {} and {} differ", l(*a), l(*b))));
                }
                l(*a)
            }
            Op::Scale(x, _) | Op::Log { x, .. } | Op::AbsFloor { x, .. } => l(*x),
            Op::SoftmaxT { x, temperature } => {
                if !(*temperature > 0.0) {
                    return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
                }
                l(*x)
            }
            Op::Sum(_) | Op::Mean(_) => 1,
            Op::DotConst { x, weights } => {
                if weights.len() != l(*x) {
                    return Err(shape_err(idx, name, format!("weights {} vs input {}", weights.len(), l(*x))));
                }
                1
            }
            Op::Index { x, index } => {
                if *index >= l(*x) {
                    return Err(shape_err(idx, name, format!("index {index} out of range {}", l(*x))));
                }
                1
            }
        };
        Ok(self.push(op, len))
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        self.nodes.push(Node { op, len });
        NodeId(self.nodes.len() - 1)
    }

    /// Runs the forward sweep and keeps every intermediate value.
    pub fn forward<'g>(&'g self, params: &[Vec<f64>], inputs: &[&[f64]]) -> Result<Trace<'g>> {
        if params.len() != self.param_lens.len() {
            return Err(Error::Shape(format!(
                "graph expects {} parameter arrays, got {}",
                self.param_lens.len(),
                params.len()
            )));
        }
        for (i, (p, &want)) in params.iter().zip(&self.param_lens).enumerate() {
            if p.len() != want {
                return Err(Error::Shape(format!("parameter {i} has length {}, expected {want}", p.len())));
            }
        }
        if inputs.len() != self.input_lens.len() {
            return Err(Error::Shape(format!(
                "graph has {} input slots, {} bound",
                self.input_lens.len(),
                inputs.len()
            )));
        }
        for (i, (x, &want)) in inputs.iter().zip(&self.input_lens).enumerate() {
            if x.len() != want {
                return Err(Error::Shape(format!(
                    "input '{}' has length {}, expected {want}",
                    self.input_names[i],
                    x.len()
                )));
            }
        }

        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = forward_op(&node.op, &values, params, inputs, node.len);
            if let Some(bad) = v.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                    value: *bad,
                });
            }
            values.push(v);
        }
        Ok(Trace { graph: self, values })
    }

    /// Loss value and exact reverse-mode gradients of the last node, which
    /// must be a scalar.
    pub fn evaluate_with_gradients(&self, params: &[Vec<f64>], inputs: &[&[f64]]) -> Result<GradientBundle> {
        let trace = self.forward(params, inputs)?;
        let out = NodeId(self.nodes.len() - 1);
        trace.gradients(out)
    }

    /// Value of the last node, which must be a scalar.
    pub fn evaluate(&self, params: &[Vec<f64>], inputs: &[&[f64]]) -> Result<f64> {
        let trace = self.forward(params, inputs)?;
        let out = NodeId(self.nodes.len() - 1);
        trace.scalar(out)
    }
}

fn operands(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
        Op::Conv1d { x, weight, bias, .. } => {
            let mut v = vec![*x, *weight];
            v.extend(bias.iter().copied());
            v
        }
        Op::KernelAverage { x, .. } => vec![*x],
        Op::AddBias { x, bias, .. } => vec![*x, *bias],
        Op::Relu(x)
        | Op::MaxPool { x, .. }
        | Op::GlobalAvgPool { x, .. }
        | Op::Scale(x, _)
        | Op::SoftmaxT { x, .. }
        | Op::Log { x, .. }
        | Op::AbsFloor { x, .. }
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::DotConst { x, .. }
        | Op::Index { x, .. } => vec![*x],
        Op::Affine { x, weight, bias, .. } => vec![*x, *weight, *bias],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
    }
}

/// Same-length convolution with zero padding:
/// `y[n] = sum_{m=1}^{2M+1} x[n - m + M + 1] * k[m]` (1-based `m`).
pub fn convolve_same(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    convolve_same_acc(x, kernel, 1.0, &mut y);
    y
}

fn convolve_same_acc(x: &[f64], kernel: &[f64], scale: f64, y: &mut [f64]) {
    let half = (kernel.len() / 2) as isize;
    let n = x.len() as isize;
    for (out_idx, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &k) in kernel.iter().enumerate() {
            // 0-based j corresponds to m = j + 1, so the read index is n - j + M.
            let src = out_idx as isize - j as isize + half;
            if src >= 0 && src < n {
                acc += x[src as usize] * k;
            }
        }
        *out += scale * acc;
    }
}

/// Adjoint of [`convolve_same`]: accumulates `K^T g` into `dx`.
fn convolve_same_adjoint(g: &[f64], kernel: &[f64], scale: f64, dx: &mut [f64]) {
    let half = (kernel.len() / 2) as isize;
    let n = dx.len() as isize;
    for (out_idx, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        for (j, &k) in kernel.iter().enumerate() {
            let src = out_idx as isize - j as isize + half;
            if src >= 0 && src < n {
                dx[src as usize] += scale * go * k;
            }
        }
    }
}

/// Mean of [`convolve_same`] over the kernel list.
pub fn kernel_average(x: &[f64], kernels: &[Vec<f64>]) -> Vec<f64> {
    let m = kernels.len() as f64;
    let mut acc = vec![0.0; x.len()];
    for k in kernels {
        let y = convolve_same(x, k);
        for (a, v) in acc.iter_mut().zip(y) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

fn softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

fn forward_op(op: &Op, values: &[Vec<f64>], params: &[Vec<f64>], inputs: &[&[f64]], len: usize) -> Vec<f64> {
    let v = |n: &NodeId| values[n.0].as_slice();
    match op {
        Op::Input(slot) => inputs[*slot].to_vec(),
        Op::Param(i) => params[*i].clone(),
        Op::Constant(c) => c.as_ref().clone(),
        Op::Conv1d { x, weight, bias, shape } => {
            let x = v(x);
            let w = v(weight);
            let in_len = x.len() / shape.in_channels;
            let out_len = len / shape.out_channels;
            let mut y = vec![0.0; len];
            let p = shape.padding as isize;
            for o in 0..shape.out_channels {
                let yo = &mut y[o * out_len..(o + 1) * out_len];
                if let Some(b) = bias {
                    let bo = v(b)[o];
                    yo.iter_mut().for_each(|y| *y = bo);
                }
                for i in 0..shape.in_channels {
                    let xi = &x[i * in_len..(i + 1) * in_len];
                    let wk = &w[(o * shape.in_channels + i) * shape.kernel..][..shape.kernel];
                    for (t, yt) in yo.iter_mut().enumerate() {
                        let start = (t * shape.stride) as isize - p;
                        let mut acc = 0.0;
                        if start >= 0 && start as usize + shape.kernel <= in_len {
                            let s = start as usize;
                            for (a, b) in xi[s..s + shape.kernel].iter().zip(wk) {
                                acc += a * b;
                            }
                        } else {
                            for (k, &wv) in wk.iter().enumerate() {
                                let src = start + k as isize;
                                if src >= 0 && (src as usize) < in_len {
                                    acc += xi[src as usize] * wv;
                                }
                            }
                        }
                        *yt += acc;
                    }
                }
            }
            y
        }
        Op::KernelAverage { x, kernels } => kernel_average(v(x), kernels),
        Op::AddBias { x, bias, channels } => {
            let x = v(x);
            let b = v(bias);
            let per = x.len() / channels;
            x.iter().enumerate().map(|(i, &xv)| xv + b[i / per]).collect()
        }
        Op::Relu(x) => v(x).iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        Op::MaxPool { x, channels, size } => {
            let x = v(x);
            let per = x.len() / channels;
            let out_per = per / size;
            let mut y = Vec::with_capacity(len);
            for c in 0..*channels {
                for t in 0..out_per {
                    let win = &x[c * per + t * size..c * per + (t + 1) * size];
                    y.push(win.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                }
            }
            y
        }
        Op::GlobalAvgPool { x, channels } => {
            let x = v(x);
            let per = x.len() / channels;
            x.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect()
        }
        Op::Affine { x, weight, bias, outputs } => {
            let x = v(x);
            let w = v(weight);
            let b = v(bias);
            (0..*outputs)
                .map(|o| b[o] + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        }
        Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(a, b)| a + b).collect(),
        Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(a, b)| a - b).collect(),
        Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(a, b)| a * b).collect(),
        Op::Div(a, b) => v(a).iter().zip(v(b)).map(|(a, b)| a / b).collect(),
        Op::Scale(x, s) => v(x).iter().map(|a| a * s).collect(),
        Op::SoftmaxT { x, temperature } => softmax_t(v(x), *temperature),
        Op::Log { x, floor } => v(x).iter().map(|a| a.max(*floor).ln()).collect(),
        Op::AbsFloor { x, floor } => v(x).iter().map(|a| a.abs().max(*floor)).collect(),
        Op::Sum(x) => vec![v(x).iter().sum()],
        Op::Mean(x) => vec![v(x).iter().sum::<f64>() / v(x).len() as f64],
        Op::DotConst { x, weights } => vec![v(x).iter().zip(weights.iter()).map(|(a, b)| a * b).sum()],
        Op::Index { x, index } => vec![v(x)[*index]],
    }
}

/// Forward values of every node, ready for backward sweeps.
pub struct Trace<'g> {
    graph: &'g Graph,
    values: Vec<Vec<f64>>,
}

/// Loss value with gradients for every parameter and input slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub params: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

/// Cotangents with respect to parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Cotangents {
    pub params: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trace<'_> {
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.values[id.0];
        if v.len() != 1 {
            return Err(Error::Shape(format!("node {} has length {}, expected a scalar", id.0, v.len())));
        }
        Ok(v[0])
    }

    pub fn gradients(&self, output: NodeId) -> Result<GradientBundle> {
        let loss = self.scalar(output)?;
        let ct = self.vjp(output, &[1.0])?;
        Ok(GradientBundle {
            loss,
            params: ct.params,
            inputs: ct.inputs,
        })
    }

    /// Vector-Jacobian product of node `output` with cotangent `seed`.
    pub fn vjp(&self, output: NodeId, seed: &[f64]) -> Result<Cotangents> {
        let g = self.graph;
        if seed.len() != g.nodes[output.0].len {
            return Err(Error::Shape(format!(
                "seed length {} does not match node {} length {}",
                seed.len(),
                output.0,
                g.nodes[output.0].len
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.to_vec());
        let mut params: Vec<Vec<f64>> = g.param_lens.iter().map(|&l| vec![0.0; l]).collect();
        let mut inputs: Vec<Vec<f64>> = g.input_lens.iter().map(|&l| vec![0.0; l]).collect();

        for idx in (0..=output.0).rev() {
            let Some(gy) = adj[idx].take() else { continue };
            let node = &g.nodes[idx];
            if let Some(bad) = gy.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                    value: *bad,
                });
            }
            self.backward_op(idx, &node.op, &gy, &mut adj, &mut params, &mut inputs);
        }
        Ok(Cotangents { params, inputs })
    }

    fn backward_op(
        &self,
        idx: usize,
        op: &Op,
        gy: &[f64],
        adj: &mut [Option<Vec<f64>>],
        params: &mut [Vec<f64>],
        inputs: &mut [Vec<f64>],
    ) {
        let vals = &self.values;
        let mut acc = |n: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let len = vals[n.0].len();
            let slot = adj[n.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match op {
            Op::Input(slot) => add_into(&mut inputs[*slot], gy),
            Op::Param(i) => add_into(&mut params[*i], gy),
            Op::Constant(_) => {}
            Op::Conv1d { x, weight, bias, shape } => {
                let xv = &vals[x.0];
                let wv = &vals[weight.0];
                let in_len = xv.len() / shape.in_channels;
                let out_len = gy.len() / shape.out_channels;
                let p = shape.padding as isize;
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for o in 0..shape.out_channels {
                    let go = &gy[o * out_len..(o + 1) * out_len];
                    for i in 0..shape.in_channels {
                        let xi = &xv[i * in_len..(i + 1) * in_len];
                        let dxi = &mut dx[i * in_len..(i + 1) * in_len];
                        let base = (o * shape.in_channels + i) * shape.kernel;
                        let wk = &wv[base..base + shape.kernel];
                        let dwk = &mut dw[base..base + shape.kernel];
                        for (t, &g) in go.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let start = (t * shape.stride) as isize - p;
                            if start >= 0 && start as usize + shape.kernel <= in_len {
                                let s = start as usize;
                                for k in 0..shape.kernel {
                                    dwk[k] += g * xi[s + k];
                                    dxi[s + k] += g * wk[k];
                                }
                            } else {
                                for k in 0..shape.kernel {
                                    let src = start + k as isize;
                                    if src >= 0 && (src as usize) < in_len {
                                        dwk[k] += g * xi[src as usize];
                                        dxi[src as usize] += g * wk[k];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, &mut |s| add_into(s, &dx));
                acc(*weight, &mut |s| add_into(s, &dw));
                if let Some(b) = bias {
                    let db: Vec<f64> = gy.chunks(out_len).map(|c| c.iter().sum()).collect();
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::KernelAverage { x, kernels } => {
                let m = kernels.len() as f64;
                acc(*x, &mut |s| {
                    for k in kernels.iter() {
                        convolve_same_adjoint(gy, k, 1.0 / m, s);
                    }
                });
            }
            Op::AddBias { x, bias, channels } => {
                let per = gy.len() / channels;
                acc(*x, &mut |s| add_into(s, gy));
                let db: Vec<f64> = gy.chunks(per).map(|c| c.iter().sum()).collect();
                acc(*bias, &mut |s| add_into(s, &db));
            }
            Op::Relu(x) => {
                let xv = &vals[x.0];
                // Derivative at exactly 0 is 0.
                acc(*x, &mut |s| {
                    for ((s, &g), &a) in s.iter_mut().zip(gy).zip(xv) {
                        if a > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::MaxPool { x, channels, size } => {
                let xv = &vals[x.0];
                let per = xv.len() / channels;
                let out_per = per / size;
                acc(*x, &mut |s| {
                    for c in 0..*channels {
                        for t in 0..out_per {
                            let base = c * per + t * size;
                            let win = &xv[base..base + size];
                            let mut best = 0;
                            for (j, &w) in win.iter().enumerate() {
                                if w > win[best] {
                                    best = j;
                                }
                            }
                            s[base + best] += gy[c * out_per + t];
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x, channels } => {
                let per = vals[x.0].len() / channels;
                acc(*x, &mut |s| {
                    for (c, chunk) in s.chunks_mut(per).enumerate() {
                        let g = gy[c] / per as f64;
                        chunk.iter_mut().for_each(|v| *v += g);
                    }
                });
            }
            Op::Affine { x, weight, bias, outputs } => {
                let xv = &vals[x.0];
                let wv = &vals[weight.0];
                let n = xv.len();
                acc(*x, &mut |s| {
                    for o in 0..*outputs {
                        let g = gy[o];
                        for (sv, w) in s.iter_mut().zip(&wv[o * n..(o + 1) * n]) {
                            *sv += g * w;
                        }
                    }
                });
                acc(*weight, &mut |s| {
                    for o in 0..*outputs {
                        let g = gy[o];
                        for (sv, xv) in s[o * n..(o + 1) * n].iter_mut().zip(xv) {
                            *sv += g * xv;
                        }
                    }
                });
                acc(*bias, &mut |s| add_into(s, gy));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, gy));
                acc(*b, &mut |s| add_into(s, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, gy));
                acc(*b, &mut |s| s.iter_mut().zip(gy).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let av = &vals[a.0];
                let bv = &vals[b.0];
                acc(*a, &mut |s| {
                    for ((s, g), bv) in s.iter_mut().zip(gy).zip(bv) {
                        *s += g * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), av) in s.iter_mut().zip(gy).zip(av) {
                        *s += g * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let av = &vals[a.0];
                let bv = &vals[b.0];
                acc(*a, &mut |s| {
                    for ((s, g), bv) in s.iter_mut().zip(gy).zip(bv) {
                        *s += g / bv;
                    }
                });
                acc(*b, &mut |s| {
                    for (((s, g), av), bv) in s.iter_mut().zip(gy).zip(av).zip(bv) {
                        *s -= g * av / (bv * bv);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(gy).for_each(|(s, g)| *s += g * c)),
            Op::SoftmaxT { x, temperature } => {
                let f = &vals[idx];
                let dot: f64 = f.iter().zip(gy).map(|(f, g)| f * g).sum();
                acc(*x, &mut |s| {
                    for ((s, &fi), &gi) in s.iter_mut().zip(f).zip(gy) {
                        *s += fi * (gi - dot) / temperature;
                    }
                });
            }
            Op::Log { x, floor } => {
                let xv = &vals[x.0];
                acc(*x, &mut |s| {
                    for ((s, g), &a) in s.iter_mut().zip(gy).zip(xv) {
                        if a > *floor {
                            *s += g / a;
                        }
                    }
                });
            }
            Op::AbsFloor { x, floor } => {
                let xv = &vals[x.0];
                acc(*x, &mut |s| {
                    for ((s, g), &a) in s.iter_mut().zip(gy).zip(xv) {
                        if a.abs() > *floor {
                            *s += g * a.signum();
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += gy[0])),
            Op::Mean(x) => {
                let n = vals[x.0].len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += gy[0] / n));
            }
            Op::DotConst { x, weights } => {
                acc(*x, &mut |s| s.iter_mut().zip(weights.iter()).for_each(|(s, w)| *s += gy[0] * w));
            }
            Op::Index { x, index } => acc(*x, &mut |s| s[*index] += gy[0]),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, over every parameter and input coordinate.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, so
/// near-zero gradients are compared absolutely against `floor`. Kinks (e.g.
/// ReLU at exactly 0) are not comparable; callers pick interior points.
pub fn finite_difference_check(graph: &Graph, params: &[Vec<f64>], inputs: &[&[f64]], step: f64) -> Result<f64> {
    finite_difference_check_with_floor(graph, params, inputs, step, 1e-6)
}

pub fn finite_difference_check_with_floor(
    graph: &Graph,
    params: &[Vec<f64>],
    inputs: &[&[f64]],
    step: f64,
    floor: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let bundle = graph.evaluate_with_gradients(params, inputs)?;
    let mut worst: f64 = 0.0;
    let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);

    let mut p = params.to_vec();
    for (pi, grad) in bundle.params.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = p[pi][j];
            p[pi][j] = orig + step;
            let up = graph.evaluate(&p, inputs)?;
            p[pi][j] = orig - step;
            let down = graph.evaluate(&p, inputs)?;
            p[pi][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel(grad[j], numeric));
        }
    }
    let mut owned: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_vec()).collect();
    for (si, grad) in bundle.inputs.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = owned[si][j];
            owned[si][j] = orig + step;
            let up = graph.evaluate(params, &as_slices(&owned))?;
            owned[si][j] = orig - step;
            let down = graph.evaluate(params, &as_slices(&owned))?;
            owned[si][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel(grad[j], numeric));
        }
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite {
            node: graph.len().saturating_sub(1),
            op: "finite_difference_check",
            value: worst,
        });
    }
    Ok(worst)
}

pub(crate) fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}
