use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Parameters are optimized per group with their own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Projector,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Projector];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Projector => "projector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: ParamGroup,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    pub fn range(self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat storage for every trainable tensor, keyed by module path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl ParamStore {
    pub(crate) fn alloc(&mut self, name: String, shape: &[usize], group: ParamGroup) -> Slot {
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            offset,
            group,
        });
        self.values.resize(offset + len, 0.0);
        Slot { offset, len }
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(ParamEntry::len)
            .sum()
    }

    /// Copy of the values belonging to one group, in storage order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| self.values[e.range()].iter().copied())
            .collect()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(vec![0.0; self.values.len()])
    }
}

/// Gradient buffer laid out exactly like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.0[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.0[slot.range()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn clear(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }
}
