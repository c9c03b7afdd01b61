//! Taped reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its
//! output value and what is needed to run its backward. Nodes only refer to
//! earlier nodes, so the tape is a topological order by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry};
use super::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    AvgPool {
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    PixelShuffle {
        input: Var,
        r: usize,
    },
    PixelUnshuffle {
        input: Var,
        r: usize,
    },
    ResizeNearest(Var),
    ResizeBilinear(Var),
    SumAll(Var),
    SquaredError {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph. One tape per forward/backward step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Shorthand for a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (or of any node before its gradient
    /// was released during a backward sweep).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geometry,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            &parents,
        ))
    }

    pub fn avg_pool2d(
        &mut self,
        input: Var,
        kernel_h: usize,
        kernel_w: usize,
        stride_h: usize,
        stride_w: usize,
    ) -> Result<Var> {
        let kernel = (kernel_h, kernel_w);
        let stride = (stride_h, stride_w);
        let out = kernels::avg_pool2d_forward(self.value(input), kernel, stride)?;
        Ok(self.push(
            out,
            Op::AvgPool {
                input,
                kernel,
                stride,
            },
            &[input],
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d_forward(self.value(input), kernel, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(inputs.to_vec()), inputs))
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(input), r)?;
        Ok(self.push(out, Op::PixelShuffle { input, r }, &[input]))
    }

    pub fn pixel_unshuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_unshuffle(self.value(input), r)?;
        Ok(self.push(out, Op::PixelUnshuffle { input, r }, &[input]))
    }

    pub fn resize_nearest(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::resize_nearest_forward(self.value(input), out_h, out_w)?;
        Ok(self.push(out, Op::ResizeNearest(input), &[input]))
    }

    /// Bilinear upsampling by an integer factor on both axes.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear", "factor must be >= 1"));
        }
        let s = self.shape(input);
        let out = kernels::resize_bilinear_forward(self.value(input), s.h * factor, s.w * factor)?;
        Ok(self.push(out, Op::ResizeBilinear(input), &[input]))
    }

    /// Sum of every element, as a `(1, 1, 1, 1)` value.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        self.push(Tensor::scalar(total), Op::SumAll(input), &[input])
    }

    /// `mean((pred - target)^2)` against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("prediction {} vs target {}", p.shape(), target.shape()),
            ));
        }
        let n = T::from_usize(p.len()).unwrap();
        let total = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SquaredError { pred, target },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are released as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::Contract(format!(
                "backward needs a (1, 1, 1, 1) loss, got {shape}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.accumulate(loss, Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            for (parent, g) in self.local_grads(i, &grad)? {
                self.accumulate(parent, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn local_grads(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let want = (needs(*input), needs(*weight), bias.is_some_and(needs));
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    grad,
                    *geometry,
                    want,
                )?;
                if let Some(g) = grads.input {
                    out.push((*input, g));
                }
                if let Some(g) = grads.weight {
                    out.push((*weight, g));
                }
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((*b, g));
                }
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
            } => {
                out.push((
                    *input,
                    kernels::avg_pool2d_backward(self.shape(*input), grad, *kernel, *stride),
                ));
            }
            Op::MaxPool { input, argmax } => {
                out.push((
                    *input,
                    kernels::max_pool2d_backward(self.shape(*input), grad, argmax),
                ));
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let mut g = grad.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                out.push((*input, g));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    out.push((*a, grad.clone()));
                }
                if needs(*b) {
                    out.push((*b, grad.clone()));
                }
            }
            Op::Concat(inputs) => {
                let mut start = 0;
                for &v in inputs {
                    let c = self.shape(v).c;
                    if needs(v) {
                        out.push((v, grad.channels(start, start + c)?));
                    }
                    start += c;
                }
            }
            Op::PixelShuffle { input, r } => {
                out.push((*input, kernels::pixel_unshuffle(grad, *r)?));
            }
            Op::PixelUnshuffle { input, r } => {
                out.push((*input, kernels::pixel_shuffle(grad, *r)?));
            }
            Op::ResizeNearest(input) => {
                out.push((
                    *input,
                    kernels::resize_nearest_backward(self.shape(*input), grad),
                ));
            }
            Op::ResizeBilinear(input) => {
                out.push((
                    *input,
                    kernels::resize_bilinear_backward(self.shape(*input), grad),
                ));
            }
            Op::SumAll(input) => {
                out.push((*input, Tensor::full(self.shape(*input), grad.data()[0])));
            }
            Op::SquaredError { pred, target } => {
                let p = self.value(*pred);
                let scale = grad.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
                let mut g = p.clone();
                for (gv, &t) in g.data_mut().iter_mut().zip(target.data()) {
                    *gv = (*gv - t) * scale;
                }
                out.push((*pred, g));
            }
        }
        out.retain(|(v, _)| needs(*v));
        Ok(out)
    }
}
