//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Tape`] records nodes in creation order, which is already a topological
//! order, so backward is a single reverse sweep. Losses whose local gradients
//! are computed in closed form enter the tape as [`Tape::custom_scalar`]
//! nodes.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Shape, Tensor};

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().clone());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape().clone());
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.value.dims().to_vec(),
                actual: value.dims().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }

    pub fn accumulate(&mut self, grad: &[f64]) -> Result<()> {
        let summed: Vec<f64> = self.grad.data().iter().zip(grad).map(|(a, b)| a + b).collect();
        self.grad = Tensor::from_vec(self.value.shape().clone(), summed)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv { input: NodeId, weight: NodeId, bias: NodeId, dims: ConvDims },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    SumAll(NodeId),
    Custom(Vec<(NodeId, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Grads {
    pub fn wrt(&self, node: NodeId) -> Option<Tensor> {
        let data = self.grads.get(node.0)?.as_ref()?;
        Tensor::from_vec(self.shapes[node.0].clone(), data.clone()).ok()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to `params[index]`; backward accumulates into it.
    pub fn param(&mut self, params: &[Parameter], index: usize) -> NodeId {
        self.push(params[index].value.clone(), Op::Param(index), true)
    }

    fn conv(&mut self, input: NodeId, weight: NodeId, bias: NodeId, kernel: usize) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let dims = conv_dims(x.dims(), wt.dims(), b.dims(), kernel)?;
        let out = kernels::conv_forward(dims, x.data(), wt.data(), b.data());
        let shape = Shape::new([dims.batch, dims.cout, dims.height, dims.width])?;
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(value, Op::Conv { input, weight, bias, dims }, rg))
    }

    /// 3×3 cross-correlation, padding 1, stride 1. `input` is `[B, Cin, H, W]`,
    /// `weight` is `[Cout, Cin, 3, 3]`, `bias` is `[Cout]`.
    pub fn conv2d_3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.conv(input, weight, bias, 3)
    }

    /// Pointwise convolution; `weight` is `[Cout, Cin]` or `[Cout, Cin, 1, 1]`.
    pub fn conv2d_1x1(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.conv(input, weight, bias, 1)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(|x| if x > 0.0 { x } else { 0.0 })?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Relu(input), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).scale(factor)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum_all())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAll(a), rg))
    }

    /// Scalar node with value `value` and known partial derivatives with
    /// respect to each parent.
    pub fn custom_scalar(&mut self, value: f64, parents: Vec<(NodeId, Tensor)>) -> Result<NodeId> {
        for (id, g) in &parents {
            if g.shape() != self.value(*id).shape() {
                return Err(Error::ShapeMismatch {
                    expected: self.value(*id).dims().to_vec(),
                    actual: g.dims().to_vec(),
                });
            }
        }
        let rg = parents.iter().any(|(id, _)| self.rg(*id));
        Ok(self.push(Tensor::scalar(value)?, Op::Custom(parents), rg))
    }

    /// Back-propagates from a scalar `root`, adding parameter gradients into
    /// `params`.
    pub fn backward(&self, root: NodeId, params: &mut [Parameter]) -> Result<Grads> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv { input, weight, bias, dims } => {
                    let cg = kernels::conv_backward(
                        *dims,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                        self.rg(*input),
                    );
                    if let Some(gi) = cg.input {
                        add_into(&mut grads, *input, &gi);
                    }
                    if self.rg(*weight) {
                        add_into(&mut grads, *weight, &cg.weight);
                    }
                    if self.rg(*bias) {
                        add_into(&mut grads, *bias, &cg.bias);
                    }
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let gi: Vec<f64> =
                        x.iter().zip(&g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                    add_into(&mut grads, *input, &gi);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        add_into(&mut grads, *a, &g);
                    }
                    if self.rg(*b) {
                        add_into(&mut grads, *b, &g);
                    }
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * f).collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).numel();
                    add_into(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Custom(parents) => {
                    for (id, local) in parents {
                        if self.rg(*id) {
                            let up = g[0];
                            let gp: Vec<f64> = if up == 1.0 {
                                local.data().to_vec()
                            } else {
                                local.data().iter().map(|v| v * up).collect()
                            };
                            add_into(&mut grads, *id, &gp);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads[i]) {
                params[*p].accumulate(g)?;
            }
        }
        for g in grads.iter().flatten() {
            crate::tensor::check_finite(g).map_err(|e| Error::Graph(format!("gradient: {e}")))?;
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().clone()).collect(),
        })
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn conv_dims(x: &[usize], w: &[usize], b: &[usize], kernel: usize) -> Result<ConvDims> {
    if x.len() != 4 {
        return Err(Error::Config(format!("conv input must be [B,C,H,W], got {x:?}")));
    }
    let (cout, cin) = match (kernel, w) {
        (3, [co, ci, 3, 3]) => (*co, *ci),
        (1, [co, ci]) | (1, [co, ci, 1, 1]) => (*co, *ci),
        _ => {
            return Err(Error::Config(format!(
                "weight shape {w:?} is not a {kernel}x{kernel} kernel"
            )))
        }
    };
    if cin != x[1] {
        return Err(Error::ShapeMismatch {
            expected: vec![x[0], cin, x[2], x[3]],
            actual: x.to_vec(),
        });
    }
    if b != [cout] {
        return Err(Error::ShapeMismatch {
            expected: vec![cout],
            actual: b.to_vec(),
        });
    }
    Ok(ConvDims {
        batch: x[0],
        cin,
        cout,
        height: x[2],
        width: x[3],
        kernel,
    })
}
