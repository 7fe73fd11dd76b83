use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, stride: usize, padding: usize },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Log(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, size: usize },
    GlobalAvgPool(Var),
    Reshape(Var),
    CrossEntropy { probs: Var, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in creation order; `backward` replays them in reverse.
///
/// A node requires a gradient when it is a leaf created with
/// `requires_grad`, or when any of its inputs does.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// A leaf that requires a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient populated by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value.with_requires_grad(rg), op))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        self.record(out, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(k), stride, padding)?;
        self.record(out, Op::Conv2d { x, k, stride, padding }, &[x, k], "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::relu(self.value(x));
        self.record(out, Op::Relu(x), &[x], "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = kernels::tanh(self.value(x));
        self.record(out, Op::Tanh(x), &[x], "tanh")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x));
        self.record(out, Op::Softmax(x), &[x], "softmax")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = kernels::log(self.value(x))?;
        self.record(out, Op::Log(x), &[x], "log")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = kernels::sum(self.value(x));
        self.record(out, Op::Sum(x), &[x], "sum")
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), size)?;
        self.record(out, Op::MaxPool2d { x, argmax }, &[x], "max_pool2d")
    }

    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(x), size)?;
        self.record(out, Op::AvgPool2d { x, size }, &[x], "avg_pool2d")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        self.record(out, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let out = kernels::flatten(self.value(x))?;
        self.record(out, Op::Reshape(x), &[x], "flatten")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.record(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Batch-mean cross-entropy of probabilities `probs` against one-hot `targets`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let loss = kernels::cross_entropy(targets, self.value(probs))?;
        let op = Op::CrossEntropy {
            probs,
            targets: targets.clone(),
        };
        self.record(Tensor::scalar(loss), op, &[probs], "cross_entropy")
    }

    /// Reverse pass from a scalar loss. Every node that requires a gradient
    /// gets one, zero if it does not influence `loss`. Repeated calls start
    /// from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            self.propagate(idx, &dout, &mut grads)?;
            grads[idx] = Some(dout);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let g = match g {
                    Some(g) => g.into_iter().map(|v| v as f32).collect(),
                    None => vec![0.0; node.value.numel()],
                };
                node.value.set_grad(Some(g));
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), dout);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Conv2d { x, k, stride, padding } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    *stride,
                    *padding,
                    dout,
                )?;
                acc(*x, dx);
                acc(*k, dk);
            }
            Op::Relu(x) => acc(*x, kernels::relu_backward(self.value(*x), dout)),
            Op::Tanh(x) => acc(*x, kernels::tanh_backward(&node.value, dout)),
            Op::Softmax(x) => acc(*x, kernels::softmax_backward(&node.value, dout)),
            Op::Log(x) => acc(*x, kernels::log_backward(self.value(*x), dout)),
            Op::Add(a, b) => {
                acc(*a, dout.to_vec());
                acc(*b, dout.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, dout.iter().zip(bv).map(|(g, &y)| g * y as f64).collect());
                acc(*b, dout.iter().zip(av).map(|(g, &x)| g * x as f64).collect());
            }
            Op::Sum(x) => acc(*x, vec![dout[0]; self.value(*x).numel()]),
            Op::MaxPool2d { x, argmax } => {
                let len = self.value(*x).numel();
                acc(*x, kernels::max_pool2d_backward(len, argmax, dout));
            }
            Op::AvgPool2d { x, size } => {
                let shape = self.value(*x).shape();
                acc(*x, kernels::avg_pool2d_backward(shape, *size, dout));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                acc(*x, kernels::global_avg_pool_backward(shape, dout));
            }
            Op::Reshape(x) => acc(*x, dout.to_vec()),
            Op::CrossEntropy { probs, targets } => {
                let g = kernels::cross_entropy_backward(targets, self.value(*probs), dout[0]);
                acc(*probs, g);
            }
        }
        Ok(())
    }
}
