//! Named parameters with gradients and trainable flags.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Insertion-ordered parameter map. Order is stable and used for
/// serialisation and flattening.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.position(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(Error::contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Replace a parameter value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    /// Store `grad` for a parameter. Frozen parameters keep a zero gradient.
    pub fn set_grad(&mut self, idx: usize, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        p.grad = if p.trainable {
            grad
        } else {
            Tensor::zeros(p.value.shape())
        };
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// L2 norm of the gradients of parameters matching `pred`.
    pub fn grad_norm(&self, pred: impl Fn(&str) -> bool) -> f64 {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.grad.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Order-sensitive FNV-1a hash of parameter values matching `pred`.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            buf.clear();
            for &x in p.value.data() {
                x.write_le(&mut buf);
            }
            for &b in p.name.as_bytes().iter().chain(&buf) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
