use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// One named tensor. Frozen tensors are bound as constants and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Parameters keyed by dot path, e.g. `encoder.block3.attn.qkv.weight`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Removes every parameter whose path starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.map.len();
        self.map.retain(|k, _| !k.starts_with(prefix));
        before - self.map.len()
    }

    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> Option<String> {
        self.map.iter().find(|(_, p)| !p.value.is_finite()).map(|(k, _)| k.clone())
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), p.trainable)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Panics on an unknown name: the name set is fixed by the config, so a
    /// miss is a programming error.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub(crate) fn replace(&mut self, name: &str, var: Var<'t, T>) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    /// Gradients of trainable parameters after backward (zeros if unreached).
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))))
            .collect()
    }
}

/// Glorot/Xavier uniform for a `[fan_in, fan_out]` matrix.
pub(crate) fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break lit(v);
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
