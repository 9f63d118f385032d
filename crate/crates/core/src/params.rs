//! Named parameter storage partitioned by network component.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Which component a parameter belongs to. Freeze sets are expressed over
/// these partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// Shared word embedding table plus text position embeddings.
    Embedding,
    TextEncoder,
    /// `W_v` and the text-query fusion attention.
    ImageEncoder,
    /// Patch backbone (patch embedding, pre-norm blocks, final norm).
    Backbone,
    Decoder,
    /// Output projection `W_o`, `b_o`.
    Head,
}

impl Partition {
    pub const ALL: [Partition; 6] = [
        Partition::Embedding,
        Partition::TextEncoder,
        Partition::ImageEncoder,
        Partition::Backbone,
        Partition::Decoder,
        Partition::Head,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSet(u8);

impl PartitionSet {
    pub const fn empty() -> Self {
        PartitionSet(0)
    }

    pub fn all() -> Self {
        Self::of(&Partition::ALL)
    }

    pub fn of(parts: &[Partition]) -> Self {
        PartitionSet(parts.iter().fold(0, |acc, p| acc | p.bit()))
    }

    pub fn contains(self, p: Partition) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn with(self, p: Partition) -> Self {
        PartitionSet(self.0 | p.bit())
    }

    pub fn without(self, p: Partition) -> Self {
        PartitionSet(self.0 & !p.bit())
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Partition> {
        Partition::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor2D,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, partition: Partition, value: Tensor2D) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            partition,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count per partition, in `Partition::ALL` order.
    pub fn partition_sizes(&self) -> [usize; 6] {
        let mut sizes = [0; 6];
        for p in &self.params {
            sizes[p.partition as usize] += p.value.len();
        }
        sizes
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace every value from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invalid(
                "copy_values_from",
                format!("{} vs {} parameters", self.params.len(), other.params.len()),
            ));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name {
                return Err(Error::invalid(
                    "copy_values_from",
                    format!("parameter `{}` vs `{}`", a.name, b.name),
                ));
            }
            a.value.ensure_shape("copy_values_from", &b.value)?;
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Bytes of every parameter in `parts`, little-endian, in store order.
    pub fn partition_bytes(&self, parts: PartitionSet) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| parts.contains(p.partition))
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Per-parameter gradients from one backward pass. `None` means the
/// parameter was not trainable in that pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor2D) {
        self.grads[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2D)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}
