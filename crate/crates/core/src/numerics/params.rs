use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Optimizer group. `Visual` covers the patch-feature input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Visual,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Ordered, named parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter and return its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Put every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values from named tensors; names and shapes must match exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {name} {:?} does not match parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}
