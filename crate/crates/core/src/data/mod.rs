//! Synthetic corpus with known ground-truth durations.
//!
//! Every vocabulary id owns a prototype frame and a base duration. An
//! utterance is a random id sequence; its target spectrogram repeats each
//! token's prototype for that token's duration, cross-fades one frame on
//! each side of every boundary and adds Gaussian noise. The frame-to-token
//! alignment is kept on the [`Utterance`] for scoring only; [`Batch`]es
//! handed to training carry ids and frames alone.

mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub use io::{decode_corpus, encode_corpus, load_corpus, save_corpus};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: u32,
    pub max_duration: u32,
    /// Per-occurrence perturbation of a token's base duration, in frames.
    pub duration_jitter: u32,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub crossfade: bool,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            vocab_size: 20,
            utterances: 200,
            min_tokens: 3,
            max_tokens: 10,
            min_duration: 2,
            max_duration: 8,
            duration_jitter: 0,
            feature_dim: 8,
            noise_std: 0.05,
            crossfade: true,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be >= 1");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("duration range must satisfy 1 <= min_duration <= max_duration");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub ids: Vec<usize>,
    pub durations: Vec<u32>,
    /// `T×F` with `T = Σ durations`.
    pub frames: Tensor<f32>,
    /// Token index of every frame.
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn new(ids: Vec<usize>, durations: Vec<u32>, frames: Tensor<f32>) -> Result<Self> {
        if ids.len() != durations.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids but {} durations",
                ids.len(),
                durations.len()
            )));
        }
        let alignment = alignment_from_durations(&durations);
        if frames.rank() != 2 || frames.shape()[0] != alignment.len() {
            return Err(Error::shape(
                "utterance",
                format!(
                    "frames {:?} vs total duration {}",
                    frames.shape(),
                    alignment.len()
                ),
            ));
        }
        Ok(Utterance {
            ids,
            durations,
            frames,
            alignment,
        })
    }

    pub fn tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }
}

pub fn alignment_from_durations(durations: &[u32]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n as usize))
        .collect()
}

/// Run lengths of a frame-to-token alignment over `tokens` tokens.
pub fn durations_from_alignment(alignment: &[usize], tokens: usize) -> Vec<u32> {
    let mut d = vec![0; tokens];
    for &k in alignment {
        d[k] += 1;
    }
    d
}

/// Per-vocabulary prototypes and base durations.
#[derive(Debug, Clone)]
pub struct Inventory {
    pub prototypes: Vec<Vec<f64>>,
    pub base_durations: Vec<u32>,
}

impl Inventory {
    fn sample(spec: &SyntheticCorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let prototypes = (0..spec.vocab_size)
            .map(|_| {
                (0..spec.feature_dim)
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect()
            })
            .collect();
        let base_durations = (0..spec.vocab_size)
            .map(|_| rng.random_range(spec.min_duration..=spec.max_duration))
            .collect();
        Inventory {
            prototypes,
            base_durations,
        }
    }
}

pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<Utterance>> {
    Ok(generate_with_inventory(spec)?.0)
}

pub fn generate_with_inventory(spec: &SyntheticCorpusSpec) -> Result<(Vec<Utterance>, Inventory)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inv = Inventory::sample(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.utterances);
    for _ in 0..spec.utterances {
        let k = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let ids: Vec<usize> = (0..k)
            .map(|_| rng.random_range(0..spec.vocab_size))
            .collect();
        let durations: Vec<u32> = ids
            .iter()
            .map(|&id| {
                let base = inv.base_durations[id] as i64;
                let j = spec.duration_jitter as i64;
                let d = if j > 0 {
                    base + rng.random_range(-j..=j)
                } else {
                    base
                };
                d.clamp(spec.min_duration as i64, spec.max_duration as i64) as u32
            })
            .collect();
        let frames = render(spec, &inv, &ids, &durations, &noise, &mut rng);
        out.push(Utterance::new(ids, durations, frames)?);
    }
    Ok((out, inv))
}

fn render(
    spec: &SyntheticCorpusSpec,
    inv: &Inventory,
    ids: &[usize],
    durations: &[u32],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let f = spec.feature_dim;
    let align = alignment_from_durations(durations);
    let t_total = align.len();
    let mut data = Vec::with_capacity(t_total * f);
    let mut start = 0usize;
    let starts: Vec<usize> = durations
        .iter()
        .map(|&d| {
            let s = start;
            start += d as usize;
            s
        })
        .collect();
    for (t, &k) in align.iter().enumerate() {
        let mut mix = vec![(k, 1.0)];
        if spec.crossfade {
            let last = t + 1 == starts[k] + durations[k] as usize;
            if last && k + 1 < ids.len() {
                mix[0].1 -= 0.25;
                mix.push((k + 1, 0.25));
            }
            if t == starts[k] && k > 0 {
                mix[0].1 -= 0.25;
                mix.push((k - 1, 0.25));
            }
        }
        for c in 0..f {
            let clean: f64 = mix
                .iter()
                .map(|&(tok, w)| w * inv.prototypes[ids[tok]][c])
                .sum();
            let n = if spec.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            data.push((clean + n) as f32);
        }
    }
    Tensor::new(vec![t_total, f], data).expect("consistent frame count")
}

/// `(train, held_out)`: the held-out split is the last `ceil(10%)` of the corpus.
pub fn split_held_out(corpus: &[Utterance]) -> (&[Utterance], &[Utterance]) {
    let n = corpus.len().div_ceil(10);
    corpus.split_at(corpus.len() - n)
}

/// Padded batch of utterances. Padding ids are 0 and padding frames are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Corpus indices of the utterances in this batch.
    pub indices: Vec<usize>,
    pub ids: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
    /// One `T_max×F` tensor per utterance.
    pub frames: Vec<Tensor<f32>>,
    pub frame_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_utterances(corpus: &[Utterance], indices: &[usize]) -> Self {
        let k_max = indices
            .iter()
            .map(|&i| corpus[i].tokens())
            .max()
            .unwrap_or(0);
        let t_max = indices
            .iter()
            .map(|&i| corpus[i].frame_count())
            .max()
            .unwrap_or(0);
        let f = indices.first().map_or(0, |&i| corpus[i].frames.shape()[1]);
        let mut b = Batch {
            indices: indices.to_vec(),
            ids: Vec::new(),
            token_mask: Vec::new(),
            frames: Vec::new(),
            frame_mask: Vec::new(),
        };
        for &i in indices {
            let u = &corpus[i];
            let mut ids = u.ids.clone();
            ids.resize(k_max, 0);
            b.ids.push(ids);
            b.token_mask
                .push((0..k_max).map(|k| k < u.tokens()).collect());
            let mut data = u.frames.data().to_vec();
            data.resize(t_max * f, 0.0);
            b.frames
                .push(Tensor::new(vec![t_max, f], data).expect("padded shape"));
            b.frame_mask
                .push((0..t_max).map(|t| t < u.frame_count()).collect());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Append an utterance consisting only of padding.
    pub fn push_padding(&mut self) {
        let k = self.ids.first().map_or(0, Vec::len);
        let shape = self
            .frames
            .first()
            .map_or(vec![0, 0], |t| t.shape().to_vec());
        self.indices.push(usize::MAX);
        self.ids.push(vec![0; k]);
        self.token_mask.push(vec![false; k]);
        self.frame_mask.push(vec![false; shape[0]]);
        self.frames.push(Tensor::zeros(shape));
    }

    /// Valid ids and frames of utterance `b`, or `None` if it is all padding.
    pub fn valid(&self, b: usize) -> Option<(Vec<usize>, Tensor<f32>)> {
        let k = self.token_mask[b].iter().filter(|&&m| m).count();
        let t = self.frame_mask[b].iter().filter(|&&m| m).count();
        if k == 0 || t == 0 {
            return None;
        }
        let f = self.frames[b].shape()[1];
        let frames =
            Tensor::new(vec![t, f], self.frames[b].data()[..t * f].to_vec()).expect("prefix");
        Some((self.ids[b][..k].to_vec(), frames))
    }
}

/// Endless stream of shuffled, padded batches; each epoch is a fresh
/// permutation drawn from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    corpus: &'a [Utterance],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

pub fn batch_iterator(
    corpus: &[Utterance],
    batch_size: usize,
    seed: u64,
) -> Result<BatchIterator<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut it = BatchIterator {
        corpus,
        batch_size,
        seed,
        epoch: 0,
        order: Vec::new(),
        pos: 0,
    };
    it.shuffle();
    Ok(it)
}

impl BatchIterator<'_> {
    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.corpus.len()).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.corpus.is_empty() {
            return None;
        }
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::from_utterances(self.corpus, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests;
