//! Named parameter storage.
//!
//! Parameters live outside any tape; each forward pass binds them as leaf
//! tensors onto a fresh [`Tape`](crate::tensor::Tape). Iteration order is
//! insertion order, which fixes the gradient layout, the optimizer state
//! layout and the checkpoint manifest.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: data length does not match shape"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "param {name} inserted twice"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, shape, data });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param<S> {
        let idx = self.by_name[name];
        &self.params[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<S> {
        let idx = self.by_name[name];
        &mut self.params[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Binds every parameter as a leaf on `tape`, in insertion order.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Binding {
        let ids = self
            .params
            .iter()
            .map(|p| {
                tape.leaf(p.data.clone(), p.shape.clone(), trainable)
                    .expect("stored param shape is consistent")
            })
            .collect();
        Binding { ids }
    }

    /// FNV-1a over the exact bit patterns of every value, in insertion order.
    /// Used to assert that frozen parameters never change.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for v in &p.data {
                for b in v.to_f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Casts every value through f64 into another precision.
    pub fn convert<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(
                p.name.clone(),
                p.shape.clone(),
                p.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            );
        }
        out
    }
}

/// Tape leaf ids for a bound [`ParamStore`], index-aligned with it.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, index: usize) -> TensorId {
        self.ids[index]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Resolves names to bound tensor ids for one store/binding pair.
pub struct BoundParams<'a, S> {
    store: &'a ParamStore<S>,
    binding: &'a Binding,
}

impl<'a, S: Scalar> BoundParams<'a, S> {
    pub fn new(store: &'a ParamStore<S>, binding: &'a Binding) -> Self {
        BoundParams { store, binding }
    }

    pub fn id(&self, name: &str) -> TensorId {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        self.binding.id(idx)
    }
}
