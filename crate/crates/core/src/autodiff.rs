//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Every operation appends a node whose
//! inputs already exist, so the node vector is a topological order and the
//! backward pass is a single reverse sweep. Constants may be borrowed from a
//! frozen weight store for the lifetime of the graph instead of copied.

use std::borrow::Cow;

use crate::error::{ensure, Error, Result};
use crate::kernels::{self, AdainSaved, ConvDims};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, dims: ConvDims },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Upsample2x { x: Var },
    AvgPool2x { x: Var },
    Adain { x: Var, scale: Var, shift: Var, saved: AdainSaved },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    MatVec { w: Var, x: Var },
    Row { m: Var, index: usize },
    Sum { x: Var },
    MeanAbs { x: Var },
    MeanSquare { x: Var },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`, or `None`
    /// if `v` does not influence it through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `like` when no
    /// gradient reached `v`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    /// A constant borrowed for the graph's lifetime.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let dims = ConvDims::new(x, k, b, pad)?;
        let y = kernels::conv2d_forward(&dims, x, k, b);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = kernels::leaky_relu(self.value(x), slope);
        self.push(y, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x { x }, &[x]))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool2x(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2x { x }, &[x]))
    }

    pub fn adain(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (y, saved) =
            kernels::adain_forward(self.value(x), self.value(scale), self.value(shift), eps)?;
        Ok(self.push(
            y,
            Op::Adain {
                x,
                scale,
                shift,
                saved,
            },
            &[x, scale, shift],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| factor * v);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    /// `w [M,N] · x [N] -> [M]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let y = kernels::matvec(self.value(w), self.value(x))?;
        Ok(self.push(y, Op::MatVec { w, x }, &[w, x]))
    }

    /// Row `index` of a rank-2 tensor, as a vector.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let t = self.value(m);
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::dim("row", format!("rank-2 expected, got {:?}", t.shape())));
        };
        ensure!(
            index < rows,
            Error::dim("row", format!("row {index} out of {rows}"))
        );
        let y = Tensor::new([cols], t.data()[index * cols..(index + 1) * cols].to_vec())?;
        Ok(self.push(y, Op::Row { m, index }, &[m]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64);
        self.push(y, Op::MeanAbs { x }, &[x])
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64);
        self.push(y, Op::MeanSquare { x }, &[x])
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        ensure!(
            out.len() == 1,
            Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            ))
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), 1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut emit = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                if self.wants(*input) {
                    emit(*input, kernels::conv2d_grad_input(dims, g, self.value(*kernel)));
                }
                if self.wants(*kernel) {
                    emit(*kernel, kernels::conv2d_grad_kernel(dims, g, self.value(*input)));
                }
                if self.wants(*bias) {
                    emit(*bias, kernels::channel_sums(g));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let gx = g
                    .zip_map(self.value(*x), |gv, xv| if xv >= 0.0 { gv } else { slope * gv })
                    .expect("same shape");
                emit(*x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = g
                    .zip_map(&node.value, |gv, y| gv * y * (1.0 - y))
                    .expect("same shape");
                emit(*x, gx);
            }
            Op::Upsample2x { x } => emit(*x, kernels::sum_pool2x(g)),
            Op::AvgPool2x { x } => {
                let up = kernels::upsample2x(g).expect("rank-3");
                emit(*x, up.map(|v| 0.25 * v));
            }
            Op::Adain {
                x,
                scale,
                shift,
                saved,
            } => {
                let (gx, gscale, gshift) = kernels::adain_backward(g, self.value(*scale), saved);
                if self.wants(*x) {
                    emit(*x, gx);
                }
                if self.wants(*scale) {
                    emit(*scale, gscale);
                }
                if self.wants(*shift) {
                    emit(*shift, gshift);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    emit(*a, g.clone());
                }
                if self.wants(*b) {
                    emit(*b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    emit(*a, g.clone());
                }
                if self.wants(*b) {
                    emit(*b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    emit(*a, g.zip_map(self.value(*b), |p, q| p * q).expect("shape"));
                }
                if self.wants(*b) {
                    emit(*b, g.zip_map(self.value(*a), |p, q| p * q).expect("shape"));
                }
            }
            Op::Scale { x, factor } => emit(*x, g.map(|v| factor * v)),
            Op::MatVec { w, x } => {
                let (wt, xt) = (self.value(*w), self.value(*x));
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                if self.wants(*w) {
                    let gw = Tensor::from_fn([m, n], |i| g.data()[i / n] * xt.data()[i % n]);
                    emit(*w, gw);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; n];
                    for (i, gi) in g.data().iter().enumerate() {
                        for (o, wv) in gx.iter_mut().zip(&wt.data()[i * n..(i + 1) * n]) {
                            *o += gi * wv;
                        }
                    }
                    emit(*x, Tensor::new([n], gx).expect("shape"));
                }
            }
            Op::Row { m, index } => {
                let shape = self.value(*m).shape().to_vec();
                let cols = shape[1];
                let mut gm = Tensor::zeros(shape);
                gm.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                emit(*m, gm);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                emit(*x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::MeanAbs { x } => {
                let t = self.value(*x);
                let k = g.data()[0] / t.len() as f64;
                emit(*x, t.map(|v| k * sign(v)));
            }
            Op::MeanSquare { x } => {
                let t = self.value(*x);
                let k = 2.0 * g.data()[0] / t.len() as f64;
                emit(*x, t.map(|v| k * v));
            }
        }
    }
}

/// Subgradient of `|v|` with 0 at the kink.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
