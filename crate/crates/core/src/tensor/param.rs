use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::element::Element;
use super::tape::Gradients;
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named learnable tensors of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: expected shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Adds the gradients of one backward sweep into the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        self.accumulate_scaled(grads, 1.0);
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients<T>, factor: f64) {
        let f = T::from_f64(factor);
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            p.grad = if factor == 1.0 {
                p.grad.zip_map(g, |a, b| a + b)
            } else {
                p.grad.zip_map(g, |a, b| a + f * b)
            };
        }
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count_elements(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_elements(&self) -> usize {
        self.count_elements("")
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one seeded generator so construction order fixes every weight.
pub struct ParamBuilder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.join(name);
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn constant(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.join(name);
        self.store.add(full, value)
    }

    /// Normal init with standard deviation `1/sqrt(fan_in)`.
    pub fn fan_in_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64(normal.sample(&mut *self.rng))).collect();
        self.constant(name, Tensor::new(shape, data)?)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.id_of("a.w"), Some(ParamId(0)));
    }

    #[test]
    fn builder_scopes_names_and_is_seeded() {
        let build = |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = seeded_rng(seed);
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let mut enc = b.scope("encoder");
            let mut st = enc.scope("stage1");
            st.fan_in_normal("w", &[4, 3], 3).unwrap();
            store
        };
        let a = build(7);
        let b = build(7);
        let c = build(8);
        assert!(a.id_of("encoder.stage1.w").is_some());
        let id = a.id_of("encoder.stage1.w").unwrap();
        assert!(a.get(id).value.bit_eq(&b.get(id).value));
        assert!(!a.get(id).value.bit_eq(&c.get(id).value));
    }
}
