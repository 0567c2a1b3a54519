use std::collections::HashMap;

use crate::real::Real;
use crate::tensor::Tensor;
use crate::NnError;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    ///
    /// Both stores must hold exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::ParamSet(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, tensor) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| NnError::ParamSet(format!("missing parameter {name}")))?;
            if src.shape() != tensor.shape() {
                return Err(NnError::ShapeMismatch {
                    expected: tensor.shape().to_vec(),
                    got: src.shape().to_vec(),
                });
            }
            *tensor = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}
