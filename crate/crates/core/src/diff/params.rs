use rand::Rng;

use crate::error::{Error, Result};

use super::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph nodes for every parameter of a [`ParamSet`], in registration order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn get(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight initialised uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::glorot(shape, fan_in, fan_out, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| g.input(t.clone(), trainable)).collect())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `source` by name (with `prefix`).
    /// Shapes must match and every parameter must be present.
    pub fn load_named(&mut self, prefix: &str, source: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let (_, src) = source
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
