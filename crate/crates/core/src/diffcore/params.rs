use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named tensors owned by a model. Buffers (e.g. running batch-norm
/// statistics) live here too so checkpoints capture them, but they are
/// never bound as trainable leaves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("parameter `{name}` registered twice")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(crate::Error::ShapeMismatch {
                op: "param_set",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Copies every entry of `other` into this store under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for id in other.ids() {
            self.add(
                format!("{prefix}.{}", other.name(id)),
                other.get(id).clone(),
                other.is_trainable(id),
            )?;
        }
        Ok(())
    }

    /// Overwrites values from `other` entries named `prefix.<name>`.
    pub fn load_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for i in 0..self.entries.len() {
            let key = format!("{prefix}.{}", self.entries[i].name);
            let src = other
                .id(&key)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing entry `{key}`")))?;
            self.set(ParamId(i), other.get(src).clone())?;
        }
        Ok(())
    }
}
