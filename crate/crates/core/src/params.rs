use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered registry of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor and return its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Register every parameter as a graph leaf, in slot order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| graph.param(t.clone()))
            .collect()
    }

    /// Collect the gradients of bound leaves, zero-filled where a parameter
    /// did not participate.
    pub fn take_grads(&self, graph: &mut Graph, bound: &[Var]) -> Vec<Vec<f32>> {
        bound
            .iter()
            .zip(&self.entries)
            .map(|(&v, (_, t))| graph.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    /// Replace values from `other`, which must carry the same names and
    /// shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(
                "ParamStore::load_from",
                format!("expected {} tensors, found {}", self.len(), other.len()),
            ));
        }
        for ((name, dst), (oname, src)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname {
                return Err(Error::shape(
                    "ParamStore::load_from",
                    format!("expected tensor `{name}`, found `{oname}`"),
                ));
            }
            if dst.shape() != src.shape() {
                return Err(Error::shape(
                    "ParamStore::load_from",
                    format!(
                        "tensor `{name}` has shape {:?}, checkpoint has {:?}",
                        dst.shape(),
                        src.shape()
                    ),
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}
