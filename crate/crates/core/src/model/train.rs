use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LatentSource, LossBreakdown, Model, TrainLength};
use crate::autodiff::nn::{Mode, NormUpdate};
use crate::autodiff::{AdamConfig, BatchStats, Graph, ParameterStore, Real, Tensor};
use crate::data::Batch;
use crate::{Error, ExecPolicy, Result};

/// KL weight: 0 up to `start`, 1 from `end`, linear in between.
pub fn beta_schedule(step: u64, start: u64, end: u64) -> f64 {
    if step <= start {
        0.0
    } else if step >= end {
        1.0
    } else {
        (step - start) as f64 / (end - start) as f64
    }
}

/// `dim^-0.5 · min(step^-0.5, step · warmup^-1.5)`; step 0 counts as 1.
pub fn lr_schedule(step: u64, warmup: u64, dim: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Batch-averaged losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// `(1/(L·T))·Σ spec_l`, batch mean.
    pub spec: f64,
    pub dur: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    pub final_spec_per_frame: f64,
    pub lr: f64,
    pub utterances: usize,
}

/// Gradients of a batch, reduced in batch order.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub grads: Vec<(String, Tensor<T>)>,
    pub norm_updates: Vec<NormUpdate<T>>,
    pub losses: Vec<LossBreakdown>,
}

struct Single<T> {
    grads: Vec<(String, Tensor<T>)>,
    norm: Vec<NormUpdate<T>>,
    loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model,
    pub store: ParameterStore<T>,
    pub adam: AdamConfig,
    pub exec: ExecPolicy,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model) -> Result<Self> {
        let store = model.init_store()?;
        Ok(Self::with_store(model, store))
    }

    pub fn with_store(model: Model, store: ParameterStore<T>) -> Self {
        Trainer {
            model,
            store,
            adam: AdamConfig::default(),
            exec: ExecPolicy::best(),
        }
    }

    /// Unit-Gaussian reparameterization noise for utterance `slot` at `step`.
    pub fn noise(&self, step: u64, slot: usize, tokens: usize) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed ^ 0x005E_ED0F_2A7E);
        rng.set_stream((step << 16) | slot as u64);
        let z = self.model.cfg.latent_dim;
        Tensor::from_fn(vec![tokens, z], |_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            T::of(x)
        })
    }

    fn single(
        &self,
        ids: &[usize],
        target: &Tensor<T>,
        eps: Tensor<T>,
        beta: f64,
    ) -> Result<Single<T>> {
        let mut g = Graph::new();
        let frames = match self.model.cfg.train_length {
            TrainLength::Target => Some(target.shape()[0]),
            TrainLength::Predicted => None,
        };
        let latent = LatentSource::Posterior { eps };
        let mut fwd = self.model.forward(
            &mut g,
            &self.store,
            ids,
            Some(target),
            &latent,
            frames,
            &[],
            Mode::Train,
        )?;
        let loss = self.model.loss(&mut g, &fwd, target, beta)?;
        let grads = g.backward(loss.total)?;
        Ok(Single {
            grads: g.param_grads(&grads),
            norm: fwd.norm_updates(),
            loss: loss.breakdown,
        })
    }

    /// Forward and backward of every valid utterance, averaged over them.
    /// Padding-only entries are skipped.
    pub fn compute_gradients(&self, batch: &Batch, step: u64) -> Result<BatchGradients<T>> {
        let beta = beta_schedule(step, self.model.cfg.beta_start, self.model.cfg.beta_end);
        let items: Vec<(usize, Vec<usize>, Tensor<f32>)> = (0..batch.len())
            .filter_map(|b| batch.valid(b).map(|(ids, frames)| (b, ids, frames)))
            .collect();
        if items.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let results = self.exec.map(&items, |_, (slot, ids, frames)| {
            let eps = self.noise(step, *slot, ids.len());
            self.single(ids, &frames.cast::<T>(), eps, beta)
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let n = T::of(results.len() as f64);

        let mut grads: Vec<(String, Tensor<T>)> = Vec::new();
        let mut losses = Vec::with_capacity(results.len());
        let mut norm_sum: Vec<NormUpdate<T>> = Vec::new();
        for r in results {
            if grads.is_empty() {
                grads = r.grads;
            } else {
                for ((name, acc), (other, g)) in grads.iter_mut().zip(&r.grads) {
                    debug_assert_eq!(name, other);
                    acc.add_assign(g);
                }
            }
            for upd in r.norm {
                match norm_sum
                    .iter_mut()
                    .find(|u| u.layer.scale == upd.layer.scale)
                {
                    Some(acc) => add_stats(&mut acc.stats, &upd.stats),
                    None => norm_sum.push(upd),
                }
            }
            losses.push(r.loss);
        }
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x / n);
        }
        for u in norm_sum.iter_mut() {
            u.stats
                .mean
                .iter_mut()
                .chain(u.stats.var.iter_mut())
                .for_each(|x| *x = *x / n);
        }
        Ok(BatchGradients {
            grads,
            norm_updates: norm_sum,
            losses,
        })
    }

    /// One Adam update at `lr_schedule(step)`; returns batch-mean losses.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let step = self.store.step() + 1;
        let bg = self.compute_gradients(batch, step)?;
        self.store.zero_grads();
        for (name, g) in &bg.grads {
            self.store.accumulate(name, g, T::one())?;
        }
        for u in &bg.norm_updates {
            u.layer.apply_update(&mut self.store, &u.stats)?;
        }
        let cfg = &self.model.cfg;
        let lr = cfg.lr_scale * lr_schedule(step, cfg.warmup, cfg.model_dim);
        self.store.adam_step(lr, &self.adam);
        Ok(summarize(step, lr, &bg.losses))
    }
}

fn add_stats<T: Real>(acc: &mut BatchStats<T>, s: &BatchStats<T>) {
    for (a, &b) in acc.mean.iter_mut().zip(&s.mean) {
        *a = *a + b;
    }
    for (a, &b) in acc.var.iter_mut().zip(&s.var) {
        *a = *a + b;
    }
}

fn summarize(step: u64, lr: f64, losses: &[LossBreakdown]) -> StepStats {
    let n = losses.len() as f64;
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
    StepStats {
        step,
        spec: mean(&|l| l.spec_term()),
        dur: mean(&|l| l.duration),
        kl: mean(&|l| l.kl),
        beta: losses.first().map_or(0.0, |l| l.beta),
        total: mean(&|l| l.total),
        final_spec_per_frame: mean(&|l| l.final_spec_per_frame()),
        lr,
        utterances: losses.len(),
    }
}
