use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NetError, Result};
use crate::real::Real;

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

/// Named trainable arrays of one network, each with a gradient slot of the
/// same shape. Insertion order is the canonical order used by optimizers and
/// serialization.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(NetError::Shape(format!(
                "parameter {name}: shape {shape:?} holds {numel} values, got {}",
                value.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(NetError::Shape(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            grad: vec![T::zero(); value.len()],
            value,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a gradient buffer into the stored gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        if grads.frozen {
            return;
        }
        assert_eq!(grads.slots.len(), self.params.len(), "gradient buffer layout mismatch");
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }

    pub fn has_nonzero_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad.iter().any(|g| *g != T::zero()))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::c(v.as_f64())).collect(),
                    grad: p.grad.iter().map(|v| U::c(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// True when both stores have the same names and shapes in the same order.
    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Replaces values from `other`, which must share this store's layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(NetError::Shape("parameter layout mismatch".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.copy_from_slice(&b.value);
        }
        Ok(())
    }
}

/// Per-pass gradient buffer aligned with a [`ParamStore`]. A frozen buffer
/// discards parameter gradients so only input gradients are computed.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Vec<T>>,
    frozen: bool,
}

impl<T: Real> Gradients<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self {
            slots: store.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            frozen: false,
        }
    }

    pub fn frozen() -> Self {
        Self {
            slots: Vec::new(),
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    #[inline]
    pub fn slot(&mut self, id: ParamId) -> Option<&mut [T]> {
        if self.frozen {
            None
        } else {
            Some(&mut self.slots[id.0])
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.slots[id.0]
    }

    /// Slots in store order; empty for a frozen buffer.
    pub fn slots(&self) -> &[Vec<T>] {
        &self.slots
    }

    /// True when this buffer can carry gradients for every parameter of `store`.
    pub fn fits(&self, store: &ParamStore<T>) -> bool {
        !self.frozen
            && self.slots.len() == store.params.len()
            && self.slots.iter().zip(&store.params).all(|(s, p)| s.len() == p.value.len())
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            s.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn add(&mut self, other: &Gradients<T>) {
        if self.frozen || other.frozen {
            return;
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}

/// Seeded initializer: truncated normal (cut at two standard deviations)
/// for weights.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub const DEFAULT_STD: f64 = 0.02;

    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: Self::DEFAULT_STD,
        }
    }

    pub fn with_std(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn trunc_normal<T: Real>(&mut self, n: usize) -> Vec<T> {
        self.trunc_normal_with_std(n, self.std)
    }

    /// Truncated normal with an explicit standard deviation, drawing from the
    /// same stream.
    pub fn trunc_normal_with_std<T: Real>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
            .collect()
    }
}
