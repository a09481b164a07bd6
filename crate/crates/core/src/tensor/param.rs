use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He fan-in normal: `std = sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named trainable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract("param", format!("duplicate parameter {name}")));
        }
        let mut value = match init {
            Init::HeNormal { fan_in } => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Constant(c) => Tensor::full(shape, T::from_f64_lossy(c)),
        };
        value.requires_grad = true;
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, init });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put a parameter on the tape (once per tape).
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param_leaf(id.0, &self.params[id.0].value)
    }

    /// Add the tape's gradients into each bound parameter's grad buffer.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (key, var) in tape.param_vars() {
            if let (Some(p), Some(g)) = (self.params.get_mut(key), grads.get(var)) {
                p.value.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// SGD with classical momentum and L2 decay: `v = m*v + g + wd*w; w -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Apply one update from the accumulated grad buffers, then clear them.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        }
        let lr = T::from_f64_lossy(self.lr);
        let mom = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = p.value.grad.take() else { continue };
            for ((w, v), gv) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = mom * *v + gv + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_on_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", &[1], Init::Constant(1.0), &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = ps.bind(&mut tape, id);
        let wv = tape.value(w).data().to_vec();
        // f(w) = w^2 via dot(w, w)
        let f = tape.dot(w, &wv).unwrap();
        let g = tape.backward(f).unwrap();
        // dot treats the weights as constants, so scale to get d(w^2)/dw = 2w
        let grad: Vec<f64> = g.get(w).unwrap().iter().map(|v| v * 2.0).collect();
        ps.get_mut(id).value.accumulate_grad(&grad);
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut ps);
        assert!((ps.get(id).value.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f32>::new();
        ps.add("a", &[2], Init::Constant(0.0), &mut rng).unwrap();
        assert!(ps.add("a", &[2], Init::Constant(0.0), &mut rng).is_err());
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", &[3], Init::Constant(2.0), &mut rng).unwrap();
        let mut tape = Tape::new();
        let a = ps.bind(&mut tape, id);
        let b = ps.bind(&mut tape, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        ps.accumulate(&tape, &g);
        assert_eq!(ps.get(id).value.grad.as_deref(), Some(&[2.0, 2.0, 2.0][..]));
    }
}
