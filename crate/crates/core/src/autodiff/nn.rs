//! Parameterized layers built from graph ops.
//!
//! A layer only remembers parameter names and dimensions; values live in a
//! [`ParameterStore`] so that many graphs can read them concurrently.

use rand::Rng;

use super::graph::{BatchStats, Graph, Var};
use super::store::ParameterStore;
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            input,
            output,
        }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        store.insert_glorot(
            &self.weight,
            &[self.input, self.output],
            self.input,
            self.output,
            rng,
        )?;
        store.insert(&self.bias, Tensor::zeros(vec![self.output]))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

/// Same-length convolution over the row (token/time) axis.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: String,
    pub bias: String,
    pub width: usize,
    pub input: usize,
    pub output: usize,
}

impl Conv1d {
    pub fn new(prefix: &str, width: usize, input: usize, output: usize) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        Ok(Conv1d {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            width,
            input,
            output,
        })
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let fan_in = self.width * self.input;
        let fan_out = self.width * self.output;
        store.insert_glorot(
            &self.weight,
            &[self.width, self.input, self.output],
            fan_in,
            fan_out,
            rng,
        )?;
        store.insert(&self.bias, Tensor::zeros(vec![self.output]))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.conv1d(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics over the row axis; running averages for inference.
    Batch,
    /// Per-row statistics over features.
    Layer,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub scale: String,
    pub shift: String,
    pub running_mean: String,
    pub running_var: String,
    pub updates: String,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
}

/// Running-statistic update requested by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct NormUpdate<T> {
    pub layer: Norm,
    pub stats: BatchStats<T>,
}

impl Norm {
    pub fn new(prefix: &str, kind: NormKind, features: usize, momentum: f64) -> Self {
        Norm {
            kind,
            scale: format!("{prefix}.scale"),
            shift: format!("{prefix}.shift"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
            updates: format!("{prefix}.updates"),
            features,
            momentum,
            eps: 1e-5,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        store.insert(&self.scale, Tensor::full(vec![self.features], T::one()))?;
        store.insert(&self.shift, Tensor::zeros(vec![self.features]))?;
        if self.kind == NormKind::Batch {
            store.insert_buffer(&self.running_mean, Tensor::zeros(vec![self.features]))?;
            store.insert_buffer(
                &self.running_var,
                Tensor::full(vec![self.features], T::one()),
            )?;
            store.insert_buffer(&self.updates, Tensor::zeros(vec![1]))?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<NormUpdate<T>>)> {
        let gamma = g.param(store, &self.scale)?;
        let beta = g.param(store, &self.shift)?;
        let eps = T::of(self.eps);
        match (self.kind, mode) {
            (NormKind::Layer, _) => Ok((g.layer_norm(x, gamma, beta, eps)?, None)),
            (NormKind::Batch, Mode::Train) => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                Ok((
                    y,
                    Some(NormUpdate {
                        layer: self.clone(),
                        stats,
                    }),
                ))
            }
            (NormKind::Batch, Mode::Infer) => {
                let seen = store
                    .value(&self.updates)
                    .map_or(T::zero(), |t| t.data()[0]);
                if seen <= T::zero() {
                    return Err(Error::UninitializedStatistics(self.scale.clone()));
                }
                let mean = store
                    .value(&self.running_mean)
                    .expect("initialized")
                    .data()
                    .to_vec();
                let var = store
                    .value(&self.running_var)
                    .expect("initialized")
                    .data()
                    .to_vec();
                Ok((g.column_affine(x, gamma, beta, &mean, &var, eps)?, None))
            }
        }
    }

    /// Fold averaged batch statistics into the running estimates. The first
    /// update copies the statistics; later ones use exponential averaging.
    pub fn apply_update<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        stats: &BatchStats<T>,
    ) -> Result<()> {
        let seen = store
            .value(&self.updates)
            .ok_or_else(|| Error::UnknownParameter(self.updates.clone()))?
            .data()[0];
        let mom = if seen <= T::zero() {
            T::zero()
        } else {
            T::of(self.momentum)
        };
        for (name, fresh) in [
            (&self.running_mean, &stats.mean),
            (&self.running_var, &stats.var),
        ] {
            let cur = store.value(name).expect("buffer exists").data().to_vec();
            let next: Vec<T> = cur
                .iter()
                .zip(fresh.iter())
                .map(|(&c, &f)| mom * c + (T::one() - mom) * f)
                .collect();
            store.set_value(name, Tensor::new(vec![next.len()], next)?)?;
        }
        store.set_value(&self.updates, Tensor::new(vec![1], vec![seen + T::one()])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_infer_requires_statistics() {
        let mut store = ParameterStore::<f64>::new();
        let norm = Norm::new("bn", NormKind::Batch, 3, 0.99);
        norm.init(&mut store).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![4, 3]));
        let err = norm.forward(&mut g, &store, x, Mode::Infer).unwrap_err();
        assert!(matches!(err, Error::UninitializedStatistics(_)));

        let (_, upd) = norm.forward(&mut g, &store, x, Mode::Train).unwrap();
        norm.apply_update(&mut store, &upd.unwrap().stats).unwrap();
        assert!(norm.forward(&mut g, &store, x, Mode::Infer).is_ok());
    }

    #[test]
    fn running_stats_use_momentum_after_first_update() {
        let mut store = ParameterStore::<f64>::new();
        let norm = Norm::new("bn", NormKind::Batch, 1, 0.99);
        norm.init(&mut store).unwrap();
        let s1 = BatchStats {
            mean: vec![2.0],
            var: vec![4.0],
        };
        norm.apply_update(&mut store, &s1).unwrap();
        assert_eq!(store.value("bn.running_mean").unwrap().data(), &[2.0]);
        let s2 = BatchStats {
            mean: vec![12.0],
            var: vec![4.0],
        };
        norm.apply_update(&mut store, &s2).unwrap();
        let m = store.value("bn.running_mean").unwrap().data()[0];
        assert!((m - 2.1).abs() < 1e-12);
    }

    #[test]
    fn linear_init_shapes() {
        let mut store = ParameterStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Linear::new("l", 10, 16).init(&mut store, &mut rng).unwrap();
        assert_eq!(store.value("l.weight").unwrap().shape(), &[10, 16]);
        assert!(store
            .value("l.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn even_conv_width_rejected() {
        assert!(Conv1d::new("c", 2, 3, 3).is_err());
    }
}
