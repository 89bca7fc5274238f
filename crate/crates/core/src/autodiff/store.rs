use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    /// Buffers (e.g. running statistics) are saved with the parameters but
    /// never updated by the optimizer.
    pub trainable: bool,
}

impl<T: Real> Entry<T> {
    fn new(value: Tensor<T>, trainable: bool) -> Self {
        let z = Tensor::zeros(value.shape().to_vec());
        Entry {
            grad: z.clone(),
            first_moment: z.clone(),
            second_moment: z,
            value,
            trainable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Entry<T>>,
    step: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        self.insert_entry(name.into(), value, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        self.insert_entry(name.into(), value, false)
    }

    fn insert_entry(&mut self, name: String, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.entries.insert(name, Entry::new(value, trainable));
        Ok(())
    }

    /// Glorot-uniform matrix: `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..=bound)));
        self.insert(name, t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    /// Replace a value keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{name}`: {:?} vs {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// `grad[name] += scale · g`.
    pub fn accumulate(&mut self, name: &str, g: &Tensor<T>, scale: T) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if e.grad.shape() != g.shape() {
            return Err(Error::shape(
                "accumulate",
                format!("`{name}`: {:?} vs {:?}", e.grad.shape(), g.shape()),
            ));
        }
        for (a, &b) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    /// One bias-corrected Adam update of every trainable entry; increments the step counter.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powi(t));
        let c2 = T::of(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(cfg.eps));
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            let Entry {
                value,
                grad,
                first_moment,
                second_moment,
                ..
            } = e;
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(first_moment.data_mut())
                .zip(second_moment.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Copy with every tensor converted to another precision (moments reset).
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), Entry::new(e.value.cast(), e.trainable)))
                .collect(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn glorot_bound() {
        let mut s = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.insert_glorot("w", &[10, 14], 10, 14, &mut rng).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(s
            .value("w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        s.insert_buffer("b", Tensor::new(vec![1], vec![5.0]).unwrap())
            .unwrap();
        s.accumulate("w", &Tensor::new(vec![2], vec![3.0, -0.5]).unwrap(), 1.0)
            .unwrap();
        s.accumulate("b", &Tensor::new(vec![1], vec![1.0]).unwrap(), 1.0)
            .unwrap();
        s.adam_step(0.1, &AdamConfig::default());
        let w = s.value("w").unwrap().data();
        // bias-corrected first step is lr · sign(g)
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.value("b").unwrap().data(), &[5.0]);
        assert_eq!(s.step(), 1);
    }
}
