use super::{Gradients, Result, Tape, Tensor, TensorError, Var};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument {
                op: "param",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "param",
                msg: format!("unknown parameter `{name}`"),
            })?;
        if self.tensors[i].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Put every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Put every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        }
    }
}

/// The tape handles of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter in store order, zeros where unreachable.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(tape, v))
            .collect()
    }
}
