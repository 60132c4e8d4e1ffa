use std::collections::HashMap;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    /// Slash-separated provenance path, e.g. `acb3/icm/aspp/branch_r2/weight`.
    pub name: String,
    pub tensor: Tensor<T>,
    /// Accumulated gradient; `None` until a backward pass deposits one.
    pub grad: Option<Vec<T>>,
}

/// Ordered, name-unique collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Adds a parameter and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(vec![format!("duplicate parameter name `{name}`")]));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, grad: None });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter as a gradient-receiving leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect()
    }

    /// Adds the adjoints of `bound` (from [`ParamStore::bind`]) into each
    /// parameter's gradient. Parameters the sweep never reached get zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            let buf = p.grad.get_or_insert_with(|| vec![T::zero(); p.tensor.len()]);
            if let Some(g) = tape.grad(v) {
                for (d, &s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
