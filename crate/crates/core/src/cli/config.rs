//! `key = value` run configuration with `--key value` overrides.
//!
//! Keys are the field names of [`ModelConfig`], its [`SoftDtwConfig`] and
//! [`SyntheticCorpusSpec`]. `vocab_size`, `feature_dim` and `seed` exist on
//! both the model and the corpus and set both.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::nn::NormKind;
use crate::data::SyntheticCorpusSpec;
use crate::model::ModelConfig;
use crate::{Error, Result};

pub const KEYS: &[&str] = &[
    "vocab_size",
    "model_dim",
    "feature_dim",
    "latent_dim",
    "blocks",
    "decoder_width",
    "duration_width",
    "ffn_dim",
    "norm",
    "bn_momentum",
    "gamma",
    "warp",
    "band_half_width",
    "cost_indexing",
    "lambda_dur",
    "beta_start",
    "beta_end",
    "warmup",
    "lr_scale",
    "batch_size",
    "train_length",
    "seed",
    "utterances",
    "min_tokens",
    "max_tokens",
    "min_duration",
    "max_duration",
    "duration_jitter",
    "noise_std",
    "crossfade",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: SyntheticCorpusSpec,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::Batch => "batch",
        NormKind::Layer => "layer",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, c) = (&mut self.model, &mut self.corpus);
        match key {
            "vocab_size" => {
                m.vocab_size = parse(key, value)?;
                c.vocab_size = m.vocab_size;
            }
            "feature_dim" => {
                m.feature_dim = parse(key, value)?;
                c.feature_dim = m.feature_dim;
            }
            "seed" => {
                m.seed = parse(key, value)?;
                c.seed = m.seed;
            }
            "model_dim" => m.model_dim = parse(key, value)?,
            "latent_dim" => m.latent_dim = parse(key, value)?,
            "blocks" => m.blocks = parse(key, value)?,
            "decoder_width" => m.decoder_width = parse(key, value)?,
            "duration_width" => m.duration_width = parse(key, value)?,
            "ffn_dim" => m.ffn_dim = parse(key, value)?,
            "norm" => {
                m.norm = match value {
                    "batch" => NormKind::Batch,
                    "layer" => NormKind::Layer,
                    _ => {
                        return Err(Error::Config(format!(
                            "norm must be `batch` or `layer`, got `{value}`"
                        )))
                    }
                }
            }
            "bn_momentum" => m.bn_momentum = parse(key, value)?,
            "gamma" => m.softdtw.gamma = parse(key, value)?,
            "warp" => m.softdtw.warp = parse(key, value)?,
            "band_half_width" => m.softdtw.band_half_width = parse(key, value)?,
            "cost_indexing" => m.softdtw.cost_indexing = value.parse()?,
            "lambda_dur" => m.lambda_dur = parse(key, value)?,
            "beta_start" => m.beta_start = parse(key, value)?,
            "beta_end" => m.beta_end = parse(key, value)?,
            "warmup" => m.warmup = parse(key, value)?,
            "lr_scale" => m.lr_scale = parse(key, value)?,
            "batch_size" => m.batch_size = parse(key, value)?,
            "train_length" => m.train_length = value.parse()?,
            "utterances" => c.utterances = parse(key, value)?,
            "min_tokens" => c.min_tokens = parse(key, value)?,
            "max_tokens" => c.max_tokens = parse(key, value)?,
            "min_duration" => c.min_duration = parse(key, value)?,
            "max_duration" => c.max_duration = parse(key, value)?,
            "duration_jitter" => c.duration_jitter = parse(key, value)?,
            "noise_std" => c.noise_std = parse(key, value)?,
            "crossfade" => c.crossfade = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text`. Blank lines and `#` comments
    /// are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()
    }

    /// Every key in file format; parsing the output reproduces `self`.
    pub fn render(&self) -> String {
        let (m, c) = (&self.model, &self.corpus);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("vocab_size", m.vocab_size.to_string());
        put("model_dim", m.model_dim.to_string());
        put("feature_dim", m.feature_dim.to_string());
        put("latent_dim", m.latent_dim.to_string());
        put("blocks", m.blocks.to_string());
        put("decoder_width", m.decoder_width.to_string());
        put("duration_width", m.duration_width.to_string());
        put("ffn_dim", m.ffn_dim.to_string());
        put("norm", norm_name(m.norm).to_string());
        put("bn_momentum", m.bn_momentum.to_string());
        put("gamma", m.softdtw.gamma.to_string());
        put("warp", m.softdtw.warp.to_string());
        put("band_half_width", m.softdtw.band_half_width.to_string());
        put("cost_indexing", m.softdtw.cost_indexing.to_string());
        put("lambda_dur", m.lambda_dur.to_string());
        put("beta_start", m.beta_start.to_string());
        put("beta_end", m.beta_end.to_string());
        put("warmup", m.warmup.to_string());
        put("lr_scale", m.lr_scale.to_string());
        put("batch_size", m.batch_size.to_string());
        put("train_length", m.train_length.to_string());
        put("seed", m.seed.to_string());
        put("utterances", c.utterances.to_string());
        put("min_tokens", c.min_tokens.to_string());
        put("max_tokens", c.max_tokens.to_string());
        put("min_duration", c.min_duration.to_string());
        put("max_duration", c.max_duration.to_string());
        put("duration_jitter", c.duration_jitter.to_string());
        put("noise_std", c.noise_std.to_string());
        put("crossfade", c.crossfade.to_string());
        s
    }
}

/// Remaining args and the `(key, value)` overrides pulled out of them.
pub type Overrides = (Vec<String>, Vec<(String, String)>);

/// Pull `--key value` / `--key=value` pairs whose key is a config key out of
/// `args`, leaving everything else in place for the flag parser.
pub fn extract_overrides(args: Vec<String>) -> Result<Overrides> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if !KEYS.contains(&name.as_str()) || name == "seed" {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("missing value for `--{name}`")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}
