//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. `decay` marks it as subject to weight decay.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat<T>, decay: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        Ok(())
    }

    pub fn he_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
        let data = (0..rows * cols).map(|_| T::c(n.sample(rng))).collect();
        self.insert(name, Mat::from_vec(rows, cols, data)?, true)
    }

    pub fn constant(&mut self, name: &str, cols: usize, v: f64, decay: bool) -> Result<()> {
        self.insert(name, Mat::filled(1, cols, T::c(v)), decay)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.values
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    pub fn get(&self, name: &str) -> Result<&Mat<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Mat<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if !slot.same_shape(&value) {
            return Err(Error::shape(format!("parameter {name} shape mismatch")));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.as_slice().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            decay: self.decay.clone(),
            index: self.index.clone(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Bound<'a> {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound {
            index: &self.index,
            vars,
        }
    }
}

/// Parameter leaves of one forward pass.
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Gradients in store order.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, g: &Gradients<T>) -> Vec<Mat<T>> {
        self.vars.iter().map(|&v| g.of(tape, v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_cast() {
        let mut p = ParamStore::<f32>::new();
        p.constant("a", 3, 1.5, false).unwrap();
        assert!(p.constant("a", 3, 1.5, false).is_err());
        assert_eq!(p.get("a").unwrap().as_slice(), &[1.5; 3]);
        let q: ParamStore<f64> = p.cast();
        assert_eq!(q.get("a").unwrap().as_slice(), &[1.5f64; 3]);
        assert!(p.set("a", Mat::zeros(2, 2)).is_err());
    }
}
