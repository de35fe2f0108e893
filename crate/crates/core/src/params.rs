//! Named parameter tensors and their binding onto a gradient tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Graph, Scalar, Tensor, Var};

/// Ordered map of parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Order-sensitive FNV-1a over names, shapes and raw bytes.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (k, v) in &self.map {
            bytes.extend_from_slice(k.as_bytes());
            for &d in v.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                x.write_le(&mut bytes);
            }
        }
        crate::rng::fnv1a(&bytes)
    }

    /// Adds `prefix` to every name.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self { map: self.map.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect() }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.map.extend(other.map);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Weight of shape `[fan_in, fan_out]` with N(0, gain²/fan_in) entries.
    pub fn init_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) {
        let std = gain / (fan_in as f64).sqrt();
        self.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::ones(&[dim]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }
}

/// Lazily places parameters on a tape, once each.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Parameters become differentiable leaves.
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true, bound: BTreeMap::new() }
    }

    /// Parameters become constants.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable { g.param(t)? } else { g.constant(t)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for `name` instead of binding the stored tensor.
    pub fn preset(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    /// Gradient of every bound parameter that received one.
    pub fn collect(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }

    /// `x·W + b` for the linear layer `name`.
    pub fn linear(&mut self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.get(g, &format!("{name}.w"))?;
        let b = self.get(g, &format!("{name}.b"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn norm(&mut self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, T::lit(1e-5))?;
        let gain = self.get(g, &format!("{name}.g"))?;
        let bias = self.get(g, &format!("{name}.b"))?;
        let y = g.mul(y, gain)?;
        Ok(g.add(y, bias)?)
    }
}
