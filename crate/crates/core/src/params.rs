//! Named parameter and buffer storage, and binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialized form of one tensor: `(name, shape, row-major values)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Trainable parameters plus non-trainable buffers (running statistics).
/// Ordered maps keep iteration, initialization and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a tape leaf. Leaves are differentiable
    /// only when `trainable` is set.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn to_named(&self) -> (Vec<NamedTensor>, Vec<NamedTensor>) {
        let f = |m: &BTreeMap<String, Tensor>| {
            m.iter()
                .map(|(k, v)| NamedTensor {
                    name: k.clone(),
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                })
                .collect()
        };
        (f(&self.params), f(&self.buffers))
    }

    pub fn from_named(params: &[NamedTensor], buffers: &[NamedTensor]) -> Result<Self> {
        let f = |v: &[NamedTensor]| -> Result<BTreeMap<String, Tensor>> {
            v.iter()
                .map(|t| Ok((t.name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?)))
                .collect()
        };
        Ok(ParamStore {
            params: f(params)?,
            buffers: f(buffers)?,
        })
    }

    /// FNV-1a over names, shapes and value bits; used to assert that
    /// independent trainings never touch each other's parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (k, v) in self.params.iter().chain(&self.buffers) {
            eat(k.as_bytes());
            for d in v.shape() {
                eat(&d.to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameters of a [`ParamStore`] bound to one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Binds already-recorded vars, e.g. the perturbable inputs of a gradient check.
    pub fn from_vars(vars: BTreeMap<String, Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    /// Gradients of every bound parameter.
    pub fn gradients(&self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), grads.get(*v)?)))
            .collect()
    }
}

/// Uniform(−bound, bound) matrix.
pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_round_trip_and_fingerprint() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::row(&[1.0, 2.0]));
        s.insert("a", Tensor::eye(2));
        s.insert_buffer("bn.mean", Tensor::row(&[0.25]));
        let (p, b) = s.to_named();
        assert_eq!(p[0].name, "a");
        let back = ParamStore::from_named(&p, &b).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint(), s.fingerprint());
        s.get_mut("a").unwrap().data_mut()[0] = 1.0 + 1e-16 * 2.0;
        assert_ne!(back.fingerprint(), s.fingerprint());
    }
}
