use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f32),
}

/// Flat storage of every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<f32>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f32> {
        self.values.iter().flatten().copied().collect()
    }

    /// Overwrites all values from a flat buffer produced by [`Self::flatten`].
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::DimMismatch(alloc::format!(
                "weights blob has {} values, model needs {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }
}

/// Scales gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = libm::sqrt(sq) as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.zero_grads(),
            v: store.zero_grads(),
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) {
        self.step += 1;
        let bc1 = 1.0 - libm::powf(self.beta1, self.step as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, self.step as f32);
        for (((p, g), m), v) in store
            .values
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (libm::sqrtf(vh) + self.eps);
            }
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f32,
    shadow: Vec<Vec<f32>>,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f32) -> Self {
        Self {
            decay,
            shadow: store.values().to_vec(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (s, p) in self.shadow.iter_mut().zip(store.values()) {
            for (a, b) in s.iter_mut().zip(p) {
                *a = self.decay * *a + (1.0 - self.decay) * b;
            }
        }
    }

    pub fn copy_to(&self, store: &mut ParamStore) {
        for (p, s) in store.values_mut().iter_mut().zip(&self.shadow) {
            p.copy_from_slice(s);
        }
    }
}
