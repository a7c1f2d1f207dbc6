use std::collections::{BTreeMap, HashMap};

use super::{DiffError, Graph, Real, Tensor, Var};

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every parameter of a store.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, DiffError> {
        self.vars.get(name).copied().ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a graph leaf. With `trainable == false` the
    /// leaves are constants and no gradient bookkeeping happens downstream.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut leaf = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).expect("stored tensor is consistent");
                leaf.requires_grad = trainable && t.requires_grad;
                (name.clone(), g.input(&leaf))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the leaf gradients of a finished backward pass into the gradient slots.
    pub fn accumulate_from(&mut self, g: &Graph<T>, bound: &Bound) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(v) = bound.vars.get(name) {
                if let Some(gr) = g.grad(*v) {
                    t.accumulate_grad(gr);
                }
            }
        }
    }

    /// Leaf gradients of a finished backward pass in name order; zeros where
    /// a parameter received none.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|(name, t)| match bound.vars.get(name).and_then(|v| g.grad(*v)) {
                Some(gr) => gr.to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }

    /// Euclidean norm over all gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| {
                let f = v.to_f64_lossy();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }
}
