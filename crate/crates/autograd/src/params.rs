//! Named parameter storage shared by models and optimizers.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    /// Optimizer group; learning rates are looked up by this tag.
    pub group: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Append-only parameter table. Removed entries leave a tombstone so ids stay stable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Option<ParamEntry<T>>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Some(ParamEntry { name, group: group.into(), value, trainable: true }));
        id
    }

    pub fn remove(&mut self, id: ParamId) -> Option<ParamEntry<T>> {
        let e = self.entries.get_mut(id.0)?.take()?;
        self.by_name.remove(&e.name);
        Some(e)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        self.entries[id.0].as_ref().expect("parameter was removed")
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        self.entries[id.0].as_mut().expect("parameter was removed")
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entry(id).value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let e = self.entry_mut(id);
        if e.value.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        matches!(self.entries.get(id.0), Some(Some(_)))
    }

    pub(crate) fn leaf_parts(&self, id: ParamId) -> (Tensor<T>, bool) {
        let e = self.entry(id);
        (e.value.clone(), e.trainable)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entry_mut(id).trainable = trainable;
    }

    /// Live parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().filter_map(|(i, e)| e.as_ref().map(|e| (ParamId(i), e)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|(_, e)| e.value.numel()).sum()
    }

    /// FNV-1a over names and value bits of the selected parameters.
    pub fn checksum(&self, filter: impl Fn(&ParamEntry<T>) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (_, e) in self.iter().filter(|(_, e)| filter(e)) {
            eat(e.name.as_bytes());
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}
