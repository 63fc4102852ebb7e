//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with a
//! closure that maps the output gradient onto the operation's inputs. The
//! graph is rebuilt for every forward pass and can be differentiated once.

use crate::error::{shape_err, Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&[Node], &[f64], &mut Grads)>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) backward: Option<BackwardFn>,
}

/// Gradient accumulators indexed by node.
pub(crate) struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    lens: Vec<usize>,
}

impl Grads {
    pub(crate) fn wants(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    /// Mutable accumulation buffer for `id`, or `None` if the node does not
    /// take part in differentiation.
    pub(crate) fn slot(&mut self, id: NodeId) -> Option<&mut [f64]> {
        if !self.needs[id.0] {
            return None;
        }
        let len = self.lens[id.0];
        Some(self.bufs[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn add(&mut self, id: NodeId, g: &[f64]) {
        if let Some(buf) = self.slot(id) {
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

/// Gradients of a scalar root with respect to the leaves of a graph.
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of `id`. Leaves that the root does not depend on get zeros;
    /// `None` means the node was not tracked.
    pub fn get(&self, id: NodeId) -> Option<std::borrow::Cow<'_, [f64]>> {
        match &self.bufs[id.0] {
            Some(b) => Some(std::borrow::Cow::Borrowed(b)),
            None if self.lens[id.0] > 0 => Some(std::borrow::Cow::Owned(vec![0.0; self.lens[id.0]])),
            None => None,
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        let len = self.lens[id.0];
        match self.bufs[id.0].take() {
            Some(b) => Some(b),
            None if len > 0 => Some(vec![0.0; len]),
            None => None,
        }
    }
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
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

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        let requires = tensor.requires_grad();
        self.input(tensor.clone(), requires)
    }

    pub fn input(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[NodeId], backward: BackwardFn) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element root through every recorded
    /// node in reverse order. A graph can only be differentiated once.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err!(
                "backward root must hold one value, got shape {:?}",
                self.nodes[root.0].value.shape()
            ));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let lens: Vec<usize> = self
            .nodes
            .iter()
            .map(|n| if n.requires_grad { n.value.len() } else { 0 })
            .collect();
        let mut grads = Grads {
            bufs: vec![None; n],
            needs,
            lens,
        };
        if !grads.needs[root.0] {
            return Ok(Gradients {
                bufs: grads.bufs,
                lens: grads.lens,
            });
        }
        grads.bufs[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(backward) = &self.nodes[i].backward else {
                continue;
            };
            // intermediate buffers are released once propagated
            let Some(g) = grads.bufs[i].take() else {
                continue;
            };
            backward(&self.nodes, &g, &mut grads);
        }
        Ok(Gradients {
            bufs: grads.bufs,
            lens: grads.lens,
        })
    }
}
