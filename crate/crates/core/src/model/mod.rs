//! Toy non-autoregressive acoustic model.
//!
//! Token ids are embedded and passed through two convolutions. A per-token
//! latent is drawn from a cross-attention posterior over the target frames
//! during training and fixed at zero otherwise. The duration predictor and
//! learned upsampler turn the token sequence into frames, and a stack of
//! lightweight-convolution blocks predicts a spectrogram after every block.

mod checkpoint;
mod eval;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{
    duration_loss_node, inferred_frame_count, DurationPredictor, UpsampleNodes, UpsamplerParams,
};
use crate::autodiff::nn::{Conv1d, Linear, Mode, NormKind, NormUpdate};
use crate::autodiff::{Graph, ParameterStore, Real, Tensor, Var};
use crate::softdtw::{soft_dtw_value_and_grad, SoftDtwConfig};
use crate::{Error, ExecPolicy, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use eval::{argmax_tokens, evaluate, evaluate_with, pearson, EvalReport};
pub use train::{beta_schedule, lr_schedule, StepStats, Trainer};

/// Which frame count the upsampler targets during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainLength {
    /// The target spectrogram's length.
    #[default]
    Target,
    /// `inferred_frame_count(d)`; Soft-DTW absorbs the mismatch.
    Predicted,
}

impl FromStr for TrainLength {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrainLength::Target),
            "predicted" => Ok(TrainLength::Predicted),
            _ => Err(Error::Config(format!(
                "train_length must be target|predicted, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for TrainLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainLength::Target => "target",
            TrainLength::Predicted => "predicted",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub blocks: usize,
    pub decoder_width: usize,
    pub duration_width: usize,
    pub ffn_dim: usize,
    pub norm: NormKind,
    pub bn_momentum: f64,
    pub softdtw: SoftDtwConfig,
    pub lambda_dur: f64,
    pub beta_start: u64,
    pub beta_end: u64,
    pub warmup: u64,
    pub lr_scale: f64,
    pub batch_size: usize,
    pub train_length: TrainLength,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 20,
            model_dim: 32,
            feature_dim: 8,
            latent_dim: 4,
            blocks: 6,
            decoder_width: 3,
            duration_width: 3,
            ffn_dim: 64,
            norm: NormKind::Batch,
            bn_momentum: 0.99,
            softdtw: SoftDtwConfig::default(),
            lambda_dur: 100.0,
            beta_start: 100,
            beta_end: 1000,
            warmup: 400,
            lr_scale: 1.0,
            batch_size: 8,
            train_length: TrainLength::Target,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
            ("blocks", self.blocks),
            ("ffn_dim", self.ffn_dim),
            ("batch_size", self.batch_size),
            ("warmup", self.warmup as usize),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, w) in [
            ("decoder_width", self.decoder_width),
            ("duration_width", self.duration_width),
        ] {
            if w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {w}")));
            }
        }
        if self.beta_start >= self.beta_end {
            return Err(Error::Config("beta_start must be < beta_end".into()));
        }
        if !(self.lambda_dur >= 0.0 && self.lr_scale > 0.0) {
            return Err(Error::Config(
                "lambda_dur must be >= 0 and lr_scale > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1)".into()));
        }
        self.softdtw
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Per-token latent statistics and sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLatent<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub z: Tensor<T>,
}

/// Zero latent: the prior mean.
pub fn prior_latent<T: Real>(tokens: usize, dim: usize) -> ResidualLatent<T> {
    let z = Tensor::zeros(vec![tokens, dim]);
    ResidualLatent {
        mu: z.clone(),
        logvar: z.clone(),
        z,
    }
}

/// `Σ ½(exp(lv) + μ² − 1 − lv)` averaged over tokens.
pub fn kl_divergence<T: Real>(latent: &ResidualLatent<T>) -> Result<T> {
    let mut g = Graph::new();
    let mu = g.input(latent.mu.clone());
    let lv = g.input(latent.logvar.clone());
    let kl = kl_node(&mut g, mu, lv)?;
    Ok(g.scalar(kl))
}

fn kl_node<T: Real>(g: &mut Graph<T>, mu: Var, lv: Var) -> Result<Var> {
    let k = g.value(mu).shape()[0].max(1);
    let e = g.exp(lv);
    let m2 = g.mul(mu, mu)?;
    let s = g.add(e, m2)?;
    let s = g.sub(s, lv)?;
    let s = g.add_scalar(s, -T::one());
    let total = g.sum(s);
    Ok(g.scale(total, T::of(0.5 / k as f64)))
}

/// Interleaved sine/cosine position embeddings, `frames×dim`.
pub fn sinusoidal_positions<T: Real>(frames: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(vec![frames, dim], |i| {
        let (t, c) = ((i / dim) as f64, i % dim);
        let rate = 10000f64.powf((c - c % 2) as f64 / dim as f64);
        T::of(if c % 2 == 0 {
            (t / rate).sin()
        } else {
            (t / rate).cos()
        })
    })
}

/// Latent source for one forward pass.
#[derive(Debug, Clone)]
pub enum LatentSource<T> {
    /// Posterior over `target`, reparameterized with unit-Gaussian `eps` (`K×Z`).
    Posterior { eps: Tensor<T> },
    /// Zero latent.
    Prior,
}

#[derive(Debug, Clone)]
struct Encoder {
    embedding: String,
    convs: [Conv1d; 2],
}

#[derive(Debug, Clone)]
struct Posterior {
    key: Linear,
    value: Linear,
    mu: Linear,
    logvar: Linear,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    glu: Linear,
    kernel: String,
    width: usize,
    out: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    head: Linear,
}

/// Layer layout of the whole model; parameter values live in a store.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    encoder: Encoder,
    posterior: Posterior,
    pub predictor: DurationPredictor,
    pub upsampler: UpsamplerParams,
    decoder: Vec<DecoderBlock>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes<T> {
    pub h: Var,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    pub z: Var,
    pub v: Var,
    pub d: Var,
    pub frames: usize,
    pub upsample: UpsampleNodes<T>,
    pub preds: Vec<Var>,
}

impl<T> ForwardNodes<T> {
    pub fn norm_updates(&mut self) -> Vec<NormUpdate<T>> {
        self.upsample.norm_update.take().into_iter().collect()
    }
}

/// Eq.-7-style objective split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Raw Soft-DTW of every block's prediction.
    pub spec: Vec<f64>,
    /// Target frame count used for normalization.
    pub frames: usize,
    pub duration: f64,
    pub kl: f64,
    pub beta: f64,
    pub lambda_dur: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(1/(L·T))·Σ spec_l`.
    pub fn spec_term(&self) -> f64 {
        self.spec.iter().sum::<f64>() / (self.spec.len() * self.frames) as f64
    }

    pub fn recombine(&self) -> f64 {
        self.spec_term() + self.lambda_dur * self.duration + self.beta * self.kl
    }

    /// Final-block Soft-DTW per target frame.
    pub fn final_spec_per_frame(&self) -> f64 {
        self.spec.last().copied().unwrap_or(0.0) / self.frames as f64
    }
}

/// Loss graph handles plus the breakdown read from them.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, f, z) = (cfg.model_dim, cfg.feature_dim, cfg.latent_dim);
        let encoder = Encoder {
            embedding: "encoder.embedding".into(),
            convs: [
                Conv1d::new("encoder.conv.0", 3, m, m)?,
                Conv1d::new("encoder.conv.1", 3, m, m)?,
            ],
        };
        let posterior = Posterior {
            key: Linear::new("posterior.key", f, m),
            value: Linear::new("posterior.value", f, m),
            mu: Linear::new("posterior.mu", m, z),
            logvar: Linear::new("posterior.logvar", m, z),
        };
        let decoder = (0..cfg.blocks)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderBlock {
                    glu: Linear::new(&format!("{p}.glu"), m, 2 * m),
                    kernel: format!("{p}.kernel"),
                    width: cfg.decoder_width,
                    out: Linear::new(&format!("{p}.out"), m, m),
                    ffn_in: Linear::new(&format!("{p}.ffn_in"), m, cfg.ffn_dim),
                    ffn_out: Linear::new(&format!("{p}.ffn_out"), cfg.ffn_dim, m),
                    head: Linear::new(&format!("{p}.head"), m, f),
                }
            })
            .collect();
        Ok(Model {
            predictor: DurationPredictor::new(m, z, cfg.duration_width)?,
            upsampler: UpsamplerParams::new(m, cfg.norm, cfg.bn_momentum),
            encoder,
            posterior,
            decoder,
            cfg,
        })
    }

    /// Fresh parameters drawn from `cfg.seed`.
    pub fn init_store<T: Real>(&self) -> Result<ParameterStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut store = ParameterStore::new();
        let (v, m) = (self.cfg.vocab_size, self.cfg.model_dim);
        store.insert_glorot(&self.encoder.embedding, &[v, m], v, m, &mut rng)?;
        for c in &self.encoder.convs {
            c.init(&mut store, &mut rng)?;
        }
        let p = &self.posterior;
        for l in [&p.key, &p.value, &p.mu, &p.logvar] {
            l.init(&mut store, &mut rng)?;
        }
        self.predictor.init(&mut store, &mut rng)?;
        self.upsampler.init(&mut store, &mut rng)?;
        for b in &self.decoder {
            b.glu.init(&mut store, &mut rng)?;
            store.insert(&b.kernel, Tensor::zeros(vec![b.width, m]))?;
            for l in [&b.out, &b.ffn_in, &b.ffn_out, &b.head] {
                l.init(&mut store, &mut rng)?;
            }
        }
        Ok(store)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("token ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Embedding lookup followed by two width-3 convolutions with swish.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        ids: &[usize],
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param(store, &self.encoder.embedding)?;
        let mut h = g.gather(table, ids)?;
        for c in &self.encoder.convs {
            let y = c.forward(g, store, h)?;
            h = g.swish(y);
        }
        Ok(h)
    }

    /// Returns `(μ, logvar, z)`.
    pub fn posterior<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        h: Var,
        target: &Tensor<T>,
        eps: &Tensor<T>,
    ) -> Result<(Var, Var, Var)> {
        let (t, f) = target.dims2("posterior")?;
        if t == 0 {
            return Err(Error::Empty("target frames"));
        }
        if f != self.cfg.feature_dim {
            return Err(Error::shape(
                "posterior",
                format!("{f} features, expected {}", self.cfg.feature_dim),
            ));
        }
        let pe = sinusoidal_positions::<T>(t, f);
        let x = g.input(target.zip_map(&pe, |a, b| a + b));
        let p = &self.posterior;
        let keys = p.key.forward(g, store, x)?;
        let vals = p.value.forward(g, store, x)?;
        let scores = g.matmul_nt(h, keys)?;
        let scores = g.scale(scores, T::of(1.0 / (self.cfg.model_dim as f64).sqrt()));
        let att = g.softmax(scores, 1)?;
        let pooled = g.matmul(att, vals)?;
        let mu = p.mu.forward(g, store, pooled)?;
        let lv = p.logvar.forward(g, store, pooled)?;
        let half = g.scale(lv, T::of(0.5));
        let std = g.exp(half);
        let e = g.input(eps.clone());
        let noise = g.mul(std, e)?;
        let z = g.add(mu, noise)?;
        Ok((mu, lv, z))
    }

    /// One prediction per decoder block, each `T×F`.
    pub fn decode_iterative<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        o: Var,
    ) -> Result<Vec<Var>> {
        let m = self.cfg.model_dim;
        let mut x = o;
        let mut preds = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let ab = b.glu.forward(g, store, x)?;
            let a = g.slice_cols(ab, 0, m)?;
            let gate = g.slice_cols(ab, m, 2 * m)?;
            let gate = g.sigmoid(gate);
            let gated = g.mul(a, gate)?;
            let k = g.param(store, &b.kernel)?;
            let k = g.softmax(k, 0)?;
            let conv = g.depthwise_conv(gated, k)?;
            let y = b.out.forward(g, store, conv)?;
            let x1 = g.add(x, y)?;
            let f = b.ffn_in.forward(g, store, x1)?;
            let f = g.swish(f);
            let f = b.ffn_out.forward(g, store, f)?;
            x = g.add(x1, f)?;
            preds.push(b.head.forward(g, store, x)?);
        }
        Ok(preds)
    }

    /// Encoder through decoder. `frames` fixes the upsampled length; `None`
    /// uses `inferred_frame_count(d)`. `control` rescales `d` before upsampling.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        ids: &[usize],
        target: Option<&Tensor<T>>,
        latent: &LatentSource<T>,
        frames: Option<usize>,
        control: &[DurationSpan],
        mode: Mode,
    ) -> Result<ForwardNodes<T>> {
        let h = self.encode(g, store, ids)?;
        let k = ids.len();
        let (mu, logvar, z) = match latent {
            LatentSource::Posterior { eps } => {
                let target = target.ok_or(Error::Empty("posterior needs a target"))?;
                let (mu, lv, z) = self.posterior(g, store, h, target, eps)?;
                (Some(mu), Some(lv), z)
            }
            LatentSource::Prior => (
                None,
                None,
                g.input(Tensor::zeros(vec![k, self.cfg.latent_dim])),
            ),
        };
        let (v, d_raw) = self.predictor.forward(g, store, h, z)?;
        let d = if control.is_empty() {
            d_raw
        } else {
            let factors = span_factors(k, control)?;
            let f = g.input(Tensor::new(
                vec![k],
                factors.into_iter().map(T::of).collect(),
            )?);
            g.mul(d_raw, f)?
        };
        let frames = frames.unwrap_or_else(|| inferred_frame_count(g.value(d)));
        let upsample = self.upsampler.forward(g, store, v, d, frames, mode)?;
        let preds = self.decode_iterative(g, store, upsample.o)?;
        Ok(ForwardNodes {
            h,
            mu,
            logvar,
            z,
            v,
            d,
            frames,
            upsample,
            preds,
        })
    }

    /// Adds the objective for `fwd` against `target` to the graph.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        fwd: &ForwardNodes<T>,
        target: &Tensor<T>,
        beta: f64,
    ) -> Result<LossNodes> {
        total_loss(
            g,
            &self.cfg,
            &fwd.preds,
            target,
            fwd.d,
            fwd.mu.zip(fwd.logvar),
            beta,
        )
    }
}

/// `(1/(L·T))·Σ_l SoftDTW(target, pred_l) + λ_dur·L_dur + β·KL`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    preds: &[Var],
    target: &Tensor<T>,
    d: Var,
    latent: Option<(Var, Var)>,
    beta: f64,
) -> Result<LossNodes> {
    if preds.is_empty() {
        return Err(Error::Empty("decoder predictions"));
    }
    let frames = target.dims2("total_loss")?.0;
    if frames == 0 {
        return Err(Error::Empty("target frames"));
    }
    let mut spec = Vec::with_capacity(preds.len());
    let mut spec_sum: Option<Var> = None;
    for &p in preds {
        let (val, grad) =
            soft_dtw_value_and_grad(target, g.value(p), &cfg.softdtw, ExecPolicy::Sequential)?;
        spec.push(val.as_f64());
        let node = g.scalar_with_grad(p, val, grad)?;
        spec_sum = Some(match spec_sum {
            Some(acc) => g.add(acc, node)?,
            None => node,
        });
    }
    let spec_term = g.scale(
        spec_sum.expect("nonempty"),
        T::of(1.0 / (preds.len() * frames) as f64),
    );
    let dur = duration_loss_node(g, d, frames)?;
    let dur_term = g.scale(dur, T::of(cfg.lambda_dur));
    let mut total = g.add(spec_term, dur_term)?;
    let mut kl = 0.0;
    if let Some((mu, lv)) = latent {
        let node = kl_node(g, mu, lv)?;
        kl = g.scalar(node).as_f64();
        let term = g.scale(node, T::of(beta));
        total = g.add(total, term)?;
    }
    let breakdown = LossBreakdown {
        spec,
        frames,
        duration: g.scalar(dur).as_f64(),
        kl,
        beta,
        lambda_dur: cfg.lambda_dur,
        total: g.scalar(total).as_f64(),
    };
    Ok(LossNodes { total, breakdown })
}

/// Multiplicative duration control over the half-open token range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationSpan {
    pub start: usize,
    pub end: usize,
    pub factor: f64,
}

impl DurationSpan {
    pub fn global(tokens: usize, factor: f64) -> Self {
        DurationSpan {
            start: 0,
            end: tokens,
            factor,
        }
    }
}

fn span_factors(k: usize, spans: &[DurationSpan]) -> Result<Vec<f64>> {
    let mut factors = vec![1.0; k];
    let mut owned = vec![false; k];
    for s in spans {
        if !(s.factor >= 0.0 && s.factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "span factor {} must be finite and >= 0",
                s.factor
            )));
        }
        if s.start >= s.end || s.end > k {
            return Err(Error::InvalidArgument(format!(
                "span {}..{} outside 0..{k} or empty",
                s.start, s.end
            )));
        }
        for i in s.start..s.end {
            if owned[i] {
                return Err(Error::InvalidArgument(format!(
                    "overlapping spans at token {i}"
                )));
            }
            owned[i] = true;
            factors[i] = s.factor;
        }
    }
    Ok(factors)
}

/// `d'_k = factor·d_k` inside each span, unchanged elsewhere.
pub fn control_durations<T: Real>(d: &Tensor<T>, spans: &[DurationSpan]) -> Result<Tensor<T>> {
    let factors = span_factors(d.len(), spans)?;
    let data = d
        .data()
        .iter()
        .zip(factors)
        .map(|(&x, f)| if f == 1.0 { x } else { x * T::of(f) })
        .collect();
    Tensor::new(d.shape().to_vec(), data)
}

/// Inference result for one token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput<T> {
    /// Final-block prediction, `T×F`.
    pub spectrogram: Tensor<T>,
    pub durations: Tensor<T>,
    /// `T×K`.
    pub attention: Tensor<T>,
}

impl<T: Real> InferOutput<T> {
    pub fn frame_count(&self) -> usize {
        self.spectrogram.shape()[0]
    }
}

impl Model {
    /// Zero latent, predicted (optionally controlled) durations, upsampled to
    /// `inferred_frame_count(d)` frames.
    pub fn infer<T: Real>(
        &self,
        store: &ParameterStore<T>,
        ids: &[usize],
        control: &[DurationSpan],
    ) -> Result<InferOutput<T>> {
        let mut g = Graph::new();
        let fwd = self.forward(
            &mut g,
            store,
            ids,
            None,
            &LatentSource::Prior,
            None,
            control,
            Mode::Infer,
        )?;
        Ok(InferOutput {
            spectrogram: g.value(*fwd.preds.last().expect("L >= 1")).clone(),
            durations: g.value(fwd.d).clone(),
            attention: g.value(fwd.upsample.w).clone(),
        })
    }

    /// Objective with the zero latent, upsampled to the target length, using
    /// inference-mode normalization.
    pub fn eval_loss<T: Real>(
        &self,
        store: &ParameterStore<T>,
        ids: &[usize],
        target: &Tensor<T>,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let t = target.dims2("eval_loss")?.0;
        let fwd = self.forward(
            &mut g,
            store,
            ids,
            Some(target),
            &LatentSource::Prior,
            Some(t),
            &[],
            Mode::Infer,
        )?;
        Ok(self.loss(&mut g, &fwd, target, 0.0)?.breakdown)
    }
}
