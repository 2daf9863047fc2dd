use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Which half of the backbone/expert partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Backbone,
    Expert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub role: Role,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, role: Role) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidArgument("parameter name must be non-empty".into()));
        }
        let grad = Tensor::zeros(value.shape());
        Ok(Parameter {
            name,
            value,
            grad,
            role,
        })
    }
}

/// Gradients keyed by parameter name, as produced by [`super::Graph::backward`].
pub type Gradients = BTreeMap<String, Tensor>;

/// Named parameter set, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> Result<()> {
        let p = Parameter::new(name, value, role)?;
        if self.params.contains_key(&p.name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {}", p.name)));
        }
        self.params.insert(p.name.clone(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Overwrites every gradient: reachable parameters take the supplied
    /// tensor, all others are zeroed.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        for p in self.params.values_mut() {
            match grads.get(&p.name) {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(Error::Shape(format!("gradient for {}", p.name)));
                    }
                    p.grad = g.clone();
                }
                None => p.grad = Tensor::zeros(p.value.shape()),
            }
        }
        Ok(())
    }

    /// SHA-256 over names and raw values of the selected parameters.
    pub fn checksum(&self, filter: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.values().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
