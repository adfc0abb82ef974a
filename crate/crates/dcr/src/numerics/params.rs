use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

/// Graph handles for every parameter of a set, in registration order.
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Substitutes another node for one parameter, e.g. a leaf under test.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.0[id.0] = v;
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
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
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, f) in self.names.iter().zip(self.frozen.iter_mut()) {
            if name.starts_with(prefix) {
                *f = frozen;
            }
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape. Frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.tensors
                .iter()
                .zip(&self.frozen)
                .map(|(t, &frozen)| {
                    if frozen {
                        g.constant(t.clone())
                    } else {
                        g.leaf(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Gradients collected after `g.backward`; `None` where nothing flowed.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.0.iter().map(|&v| g.grad(v).cloned()).collect()
    }

    /// Replaces values by name; unknown names are a schema error.
    pub fn load_named(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in values {
            let Some(id) = self.id(name) else {
                return Err(Error::Schema(format!("unknown parameter `{name}`")));
            };
            if self.tensors[id.0].shape() != value.shape() {
                return Err(Error::Schema(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    self.tensors[id.0].shape(),
                    value.shape()
                )));
            }
            self.tensors[id.0] = value.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
