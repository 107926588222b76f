//! Named parameter storage and per-graph parameter binding.

use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::NnError;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    /// Updated by optimizers.
    Param,
    /// State carried alongside parameters (running statistics, power-iteration vectors).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Order is registration order and is
/// part of the serialized format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Gradient slots aligned with a store's entries.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let f = (max_norm / norm) as f32;
            for g in self.0.iter_mut().flatten() {
                g.scale_assign(f);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.all_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
}

const MAGIC: &[u8; 4] = b"KRPS";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, kind: EntryKind, value: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate entry name {name}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, EntryKind::Param, value)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, EntryKind::Buffer, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Replaces every value with `other`'s, requiring an identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if !self.same_layout(other) {
            return Err(NnError::LayoutMismatch);
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: Vec<HeaderEntry> = self
            .entries
            .iter()
            .map(|e| HeaderEntry {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
            })
            .collect();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.total_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(NnError::Format("bad parameter container magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| NnError::Format("truncated header".into()))?;
        let header: Vec<HeaderEntry> =
            serde_json::from_slice(body).map_err(|e| NnError::Format(e.to_string()))?;
        let mut off = 12 + hlen;
        let mut store = ParamStore::new();
        for h in header {
            let n: usize = h.shape.iter().product();
            let raw = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| NnError::Format(format!("truncated tensor {}", h.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            store.push(&h.name, h.kind, Tensor::new(&h.shape, data));
        }
        if off != bytes.len() {
            return Err(NnError::Format("trailing bytes after tensors".into()));
        }
        Ok(store)
    }

    fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Binds store entries to graph leaves for one forward pass.
pub struct Binder<'a> {
    store: &'a mut ParamStore,
    vars: Vec<Option<Var>>,
    train: bool,
    grad: bool,
}

impl<'a> Binder<'a> {
    /// `train` selects batch statistics and state updates; `grad` makes
    /// parameters gradient leaves.
    pub fn new(store: &'a mut ParamStore, train: bool, grad: bool) -> Self {
        let n = store.len();
        Self {
            store,
            vars: vec![None; n],
            train,
            grad,
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.grad && self.store.entries[id.0].kind == EntryKind::Param {
            g.leaf(t)
        } else {
            g.input(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn buffer_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.store.get_mut(id)
    }

    /// Pulls gradients of the bound parameters out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .map(|v| v.and_then(|v| grads.take(v)))
                .collect(),
        )
    }
}
