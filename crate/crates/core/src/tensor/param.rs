//! Named trainable parameters and the model-wide registry.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::Real;

/// A named, optionally trainable tensor. The held tensor is a graph leaf;
/// the optimizer swaps in a fresh leaf after each update so values stay
/// immutable while a graph may still reference the old ones.
pub struct Parameter {
    name: String,
    trainable: bool,
    tensor: RefCell<Tensor>,
}

impl Parameter {
    fn new(name: String, shape: &[usize], data: Vec<Real>, trainable: bool) -> Result<Parameter> {
        let tensor = if trainable {
            Tensor::leaf(shape, data)?
        } else {
            Tensor::new(shape, data)?
        };
        Ok(Parameter {
            name,
            trainable,
            tensor: RefCell::new(tensor),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor.borrow().numel()
    }

    /// Current value as a graph leaf; clones are cheap.
    pub fn value(&self) -> Tensor {
        self.tensor.borrow().clone()
    }

    pub fn data(&self) -> Vec<Real> {
        self.tensor.borrow().data().to_vec()
    }

    /// Replace the held value with a fresh leaf (clears the gradient).
    pub fn set_data(&self, data: Vec<Real>) -> Result<()> {
        let shape = self.shape();
        if data.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let t = if self.trainable {
            Tensor::leaf(&shape, data)?
        } else {
            Tensor::new(&shape, data)?
        };
        *self.tensor.borrow_mut() = t;
        Ok(())
    }

    /// Gradient accumulated by the most recent backward passes, zero-filled
    /// when the parameter was unreachable from the loss.
    pub fn grad_or_zero(&self) -> Vec<Real> {
        self.tensor
            .borrow()
            .grad()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        self.tensor.borrow().zero_grad();
    }
}

/// Registry of all parameters of a model. Names are unique; iteration
/// order is registration order, which is deterministic per config.
#[derive(Default)]
pub struct ParamSet {
    items: Vec<Rc<Parameter>>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<Real>,
        trainable: bool,
    ) -> Result<Rc<Parameter>> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let p = Rc::new(Parameter::new(name.to_string(), shape, data, trainable)?);
        self.by_name.insert(name.to_string(), self.items.len());
        self.items.push(Rc::clone(&p));
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Parameter>> {
        self.by_name.get(name).map(|&i| &self.items[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Parameter>> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad_all(&self) {
        for p in &self.items {
            p.zero_grad();
        }
    }

    /// Snapshot of every parameter's data, for best-epoch restore.
    pub fn snapshot(&self) -> Vec<(String, Vec<Real>)> {
        self.items
            .iter()
            .map(|p| (p.name().to_string(), p.data()))
            .collect()
    }

    pub fn restore(&self, snap: &[(String, Vec<Real>)]) -> Result<()> {
        for (name, data) in snap {
            let p = self
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            p.set_data(data.clone())?;
        }
        Ok(())
    }

    /// Copy values from `other` for every name present in `self`.
    /// Names missing from `other` are left untouched.
    pub fn copy_matching(&self, other: &ParamSet) -> Result<()> {
        for p in &self.items {
            if let Some(src) = other.get(p.name()) {
                p.set_data(src.data())?;
            }
        }
        Ok(())
    }

    /// Order-sensitive hash of all parameter bits; detects any mutation.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.items {
            p.name().hash(&mut h);
            for v in p.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Export as (name, shape, values) triples for checkpointing and for
    /// the scalar reference implementation.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<Real>)> {
        self.items
            .iter()
            .map(|p| (p.name().to_string(), p.shape(), p.data()))
            .collect()
    }
}
