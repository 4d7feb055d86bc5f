use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded primitive.
///
/// Returns one entry per input; `None` where the input does not need a gradient.
pub trait Backward<T: Real = f32>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

pub struct BackwardCtx<'a, T: Real = f32> {
    inputs: Vec<&'a Tensor<T>>,
    needs_grad: Vec<bool>,
    output: &'a Tensor<T>,
    grad_output: &'a [T],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        self.inputs[i]
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs_grad[i]
    }

    pub fn output(&self) -> &'a Tensor<T> {
        self.output
    }

    pub fn grad_output(&self) -> &'a [T] {
        self.grad_output
    }
}

struct Node<T: Real> {
    tensor: Tensor<T>,
    inputs: Vec<Var>,
    func: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
}

/// Records primitive applications in execution order for one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. It participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(Node {
            tensor,
            inputs: Vec::new(),
            func: None,
            needs_grad,
        })
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Record the application of a primitive whose result is `output`.
    pub fn apply(&mut self, func: impl Backward<T> + 'static, inputs: &[Var], output: Tensor<T>) -> Var {
        for v in inputs {
            assert!(v.0 < self.nodes.len(), "input {v:?} is not on this tape");
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Node {
            tensor: output,
            inputs: inputs.to_vec(),
            func: needs_grad.then(|| Box::new(func) as Box<dyn Backward<T>>),
            needs_grad,
        })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated into a leaf by [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].tensor.take_grad()
    }

    /// Every recorded value, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].func.as_ref().map_or("leaf", |f| f.name())
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).tensor
    }

    /// Accumulate `d loss / d leaf` into every leaf tensor that requires a gradient.
    ///
    /// Nodes are visited once each, in reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.tensor.shape().to_vec()));
        }
        if !loss_node.needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(func) = &node.func {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].tensor).collect(),
                    needs_grad: node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect(),
                    output: &node.tensor,
                    grad_output: &g,
                };
                let input_grads = func.backward(&ctx);
                assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].needs_grad {
                        continue;
                    }
                    assert_eq!(ig.len(), self.nodes[v.0].tensor.numel(), "{}", func.name());
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            } else if node.tensor.requires_grad() {
                self.nodes[i].tensor.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}
