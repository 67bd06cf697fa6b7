//! Named parameter collections and matching gradient buffers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub init: InitScheme,
}

/// An ordered list of named tensors. Order is the registration order and is
/// what checkpoints, optimizers and gradient buffers index by.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, shape: Vec<usize>, init: InitScheme) -> ParamId {
        let n = shape.iter().product();
        self.tensors.push(NamedTensor { name, shape, values: vec![0.0; n], init });
        ParamId(self.tensors.len() - 1)
    }

    /// Draws every tensor from its init scheme, in registration order.
    pub fn initialize(&mut self, rng: &mut ChaCha8Rng) {
        for t in &mut self.tensors {
            match t.init {
                InitScheme::FanInUniform { fan_in } => {
                    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
                    for v in &mut t.values {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                InitScheme::Zeros => t.values.fill(0.0),
                InitScheme::Ones => t.values.fill(1.0),
            }
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].values
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { tensors: self.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect() }
    }

    /// FNV-1a over names, shapes and value bits. Used to assert that an update
    /// left a parameter set untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for t in &self.tensors {
            h.write(t.name.as_bytes());
            for &d in &t.shape {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.0
    }
}

/// Gradient buffers parallel to a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0]
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}
