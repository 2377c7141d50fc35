//! Named trainable tensors and the Adam optimizer.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Real, Tape, Var};

/// Glorot-uniform initialization for a `fan_in x fan_out` weight.
pub fn glorot<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.gen_range(-limit..limit)))
}

/// Zero-mean Gaussian entries with standard deviation `sigma`.
pub fn gaussian<T: Real>(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Array2<T> {
    let dist = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "parameter `{name}` registered twice");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Places every tensor on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Places every tensor on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Gradients for every tensor in registration order (zeros where unused).
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients<T>) -> Vec<Array2<T>> {
        self.values
            .iter()
            .zip(bound.vars.iter())
            .map(|(v, &var)| grads.get_or_zeros(var, v.dim()))
            .collect()
    }
}

/// Tape handles for a [`ParamStore`], valid for one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: i32,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate: T::of(learning_rate),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Array2<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.values.iter().map(|v| Array2::zeros(v.dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let one = T::one();
        let correction1 = one - self.beta1.powi(self.step);
        let correction2 = one - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (k, value) in params.values.iter_mut().enumerate() {
            Zip::from(value)
                .and(&mut self.first[k])
                .and(&mut self.second[k])
                .and(&grads[k])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", array![[3.0, -2.0]]);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = store.get(x).mapv(|v| 2.0 * v);
            adam.step(&mut store, &[g]);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", array![[0.1f32, -0.7], [1e-3, 5.0]]);
        let before = store.clone();
        let mut adam = Adam::new(0.0);
        adam.step(&mut store, &[array![[1.0f32, -2.0], [0.5, 3.0]]]);
        assert_eq!(store.values, before.values);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", array![[1.0]]);
        store.add("a", array![[1.0]]);
    }
}
