use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Real;

/// How a parameter block is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zero,
    /// Uniform in `±gain / sqrt(fan_in)`.
    Uniform { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

/// Named blocks inside one flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
            init,
        });
        self.total += len;
        offset
    }

    pub fn initialise<T: Real, R: Rng>(&self, rng: &mut R) -> Vec<T> {
        let mut params = vec![T::zero(); self.total];
        for e in &self.entries {
            let block = &mut params[e.offset..e.offset + e.len];
            match e.init {
                Init::Zero => {}
                Init::Uniform { fan_in, gain } => {
                    let bound = gain / (fan_in.max(1) as f64).sqrt();
                    for v in block {
                        *v = T::c(rng.random_range(-bound..bound));
                    }
                }
                Init::Normal { std } => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    for v in block {
                        *v = T::c(d.sample(rng));
                    }
                }
            }
        }
        params
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Adam optimiser state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let b1 = T::c(self.beta1);
        let b2 = T::c(self.beta2);
        let one = T::one();
        let c1 = T::c(1.0 - self.beta1.powi(self.step));
        let c2 = T::c(1.0 - self.beta2.powi(self.step));
        let lr = T::c(self.lr);
        let eps = T::c(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Rescale `grads` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
