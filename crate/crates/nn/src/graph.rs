//! Reverse-mode autodiff tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a closure mapping the output gradient to gradients of
//! its inputs. `backward` walks the tape once in reverse.

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackFn = Box<dyn Fn(&[Node], &Tensor) -> Vec<(Var, Tensor)> + Send + Sync>;

pub struct Node {
    pub(crate) value: Tensor,
    pub(crate) needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: false,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: true,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends an op node. The closure receives all nodes and the output
    /// gradient and returns gradients for the parents that need them.
    pub(crate) fn push<F>(&mut self, value: Tensor, parents: &[Var], back: F) -> Var
    where
        F: Fn(&[Node], &Tensor) -> Vec<(Var, Tensor)> + Send + Sync + 'static,
    {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            back: if needs_grad { Some(Box::new(back)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward expects a scalar, got {:?}",
            self.shape(loss)
        );
        self.backward_with(loss, Tensor::full(self.shape(loss), 1.0))
    }

    /// Backpropagates an explicit seed gradient from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(out));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[i].take() else { continue };
            for (p, pg) in back(&self.nodes, &g) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Convenience: does `nodes[v]` need a gradient?
pub(crate) fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].needs_grad
}

pub(crate) fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}
