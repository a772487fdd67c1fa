//! Named parameter storage, shared by the optimizer and the checkpoint
//! container. Insertion order is fixed at construction, which keeps both
//! optimizer state alignment and serialization deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f32>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name} shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[f32] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        (0..self.len()).map(|i| (self.names[i].as_str(), self.shapes[i].as_slice(), self.values[i].as_slice()))
    }

    /// Creates one leaf per parameter on the tape, in store order.
    pub fn bind<E: Scalar>(&self, tape: &mut Tape<E>, requires_grad: bool) -> Result<BoundParams> {
        let mut ids = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let values: Vec<E> = self.values[i].iter().map(|&v| E::from_f64(v as f64)).collect();
            ids.push(tape.leaf(&self.shapes[i], values, requires_grad)?);
        }
        Ok(BoundParams { ids })
    }

    /// Binds from an external flat `f64` vector laid out in store order
    /// (the gradient-check path).
    pub fn bind_flat<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        flat: &[f64],
        requires_grad: bool,
    ) -> Result<BoundParams> {
        if flat.len() != self.total_values() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, store holds {}",
                flat.len(),
                self.total_values()
            )));
        }
        let mut ids = Vec::with_capacity(self.len());
        let mut offset = 0;
        for i in 0..self.len() {
            let n = self.values[i].len();
            let values: Vec<E> = flat[offset..offset + n].iter().map(|&v| E::from_f64(v)).collect();
            offset += n;
            ids.push(tape.leaf(&self.shapes[i], values, requires_grad)?);
        }
        Ok(BoundParams { ids })
    }

    /// Current values flattened in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for v in &self.values {
            out.extend(v.iter().map(|&x| x as f64));
        }
        out
    }
}

/// Tape ids of bound parameters, aligned with store order.
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, store: &ParamStore, name: &str) -> TensorId {
        match store.lookup(name) {
            Some(i) => self.ids[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Collects gradients after a backward pass, zeros where a parameter is
    /// unused by the loss. Aligned with store order.
    pub fn grads<E: Scalar>(&self, store: &ParamStore, tape: &Tape<E>) -> Vec<Vec<f32>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| match tape.grad(id) {
                Some(g) => g.iter().map(|&v| v.to_f64() as f32).collect(),
                None => vec![0.0; store.values(i).len()],
            })
            .collect()
    }

    /// Gradients flattened in store order at full precision (the
    /// finite-difference verification path).
    pub fn flat_grads<E: Scalar>(&self, store: &ParamStore, tape: &Tape<E>) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.total_values());
        for (i, &id) in self.ids.iter().enumerate() {
            match tape.grad(id) {
                Some(g) => out.extend(g.iter().map(|&v| v.to_f64())),
                None => out.extend(std::iter::repeat(0.0).take(store.values(i).len())),
            }
        }
        out
    }
}

/// Uniform Xavier/Glorot initialization: +/- sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Uniform He/Kaiming initialization: +/- sqrt(6 / fan_in), the ReLU-stack
/// convention used for the conv stages.
pub fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

pub fn zeros(n: usize) -> Vec<f32> {
    vec![0.0; n]
}

pub fn ones(n: usize) -> Vec<f32> {
    vec![1.0; n]
}
