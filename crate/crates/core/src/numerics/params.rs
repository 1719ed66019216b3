use std::collections::BTreeMap;
use std::ops::Range;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named value with its accumulated gradient.
///
/// `trainable_rows` narrows training to a row range of a matrix; rows outside
/// it receive neither gradient nor optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Option<Tensor>,
    pub trainable: bool,
    pub trainable_rows: Option<Range<usize>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            gradient: None,
            trainable: true,
            trainable_rows: None,
        }
    }

    /// Flat element range that may be updated, or `None` when frozen.
    pub(crate) fn trainable_span(&self) -> Option<Range<usize>> {
        if !self.trainable {
            return None;
        }
        match &self.trainable_rows {
            None => Some(0..self.value.len()),
            Some(rows) => {
                let c = self.value.cols();
                Some(rows.start * c..rows.end * c)
            }
        }
    }
}

/// Ordered collection of parameters addressed by [`ParamId`] or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

pub(crate) static EMPTY_STORE: ParamStore = ParamStore {
    params: Vec::new(),
    index: BTreeMap::new(),
};

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::IllegalState(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
            p.trainable_rows = None;
        }
    }

    /// Resets every gradient to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match &mut p.gradient {
                Some(g) if g.shape() == p.value.shape() => g.data_mut().fill(0.0),
                g => *g = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    /// Adds computed gradients into the stored ones.
    pub fn accumulate(&mut self, grads: &super::Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.gradient {
                Some(acc) if acc.shape() == g.shape() => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter_map(|p| p.trainable_span())
            .map(|r| r.len())
            .sum()
    }

    /// FNV-1a over names, shapes and value bits; equal stores hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
