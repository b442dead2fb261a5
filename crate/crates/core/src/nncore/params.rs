use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{NnError, Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, grouped parameter tensors.
///
/// Groups are the unit of freezing during staged training.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    groups: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), groups: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, group: &str, name: &str, tensor: Tensor<T>) -> ParamId {
        if let Some(id) = self.find(name) {
            self.tensors[id.0] = tensor;
            self.groups[id.0] = group.to_string();
            return id;
        }
        self.names.push(name.to_string());
        self.groups.push(group.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Normal(0, std) initialised weight.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        group: &str,
        name: &str,
        shape: Vec<usize>,
        std: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.insert(group, name, Tensor::new(shape, data).expect("shape product"))
    }

    pub fn constant(&mut self, group: &str, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        self.insert(group, name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter in `group`
    /// (all parameters when `group` is `None`).
    pub fn hash(&self, group: Option<&str>) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if group.is_some_and(|g| g != self.groups[i]) {
                continue;
            }
            h.update(self.names[i].as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrite values from another store, matching by name.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), NnError> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(src) = other.find(name) else {
                return Err(NnError::Checkpoint(format!("missing parameter {name}")));
            };
            let src = other.get(src);
            if src.shape() != self.tensors[i].shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
