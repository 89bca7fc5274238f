use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::nn::NormKind;
use crate::autodiff::{ParameterStore, Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"PTAC2\0";
const VERSION: u32 = 1;

/// Every entry (parameters and normalization buffers) as f32, sorted by name,
/// followed by the step counter.
pub fn encode_checkpoint<T: Real>(store: &ParameterStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.entries() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = e.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in e.value.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&store.step().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub type RawEntries = Vec<(String, Tensor<f32>)>;

/// Raw entries in file order plus the step counter.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(RawEntries, u64)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format {
                kind: "checkpoint",
                offset: at,
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail("tensor too large"))?;
        let data = r
            .take(len, "values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let step = u64::from_le_bytes(r.take(8, "step counter")?.try_into().expect("8 bytes"));
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok((entries, step))
}

pub fn save_checkpoint<T: Real>(store: &ParameterStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written for a model with `base`'s training settings;
/// the architecture is recovered from the stored shapes.
pub fn load_checkpoint<T: Real>(
    path: &Path,
    base: &ModelConfig,
) -> Result<(Model, ParameterStore<T>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (entries, step) = decode_checkpoint(&buf)?;
    let cfg = config_from_entries(&entries, base)?;
    let model = Model::new(cfg)?;
    let mut store = model.init_store::<T>()?;
    if store.len() != entries.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store.set_value(&name, t.cast())?;
    }
    store.set_step(step);
    Ok((model, store))
}

fn config_from_entries(
    entries: &[(String, Tensor<f32>)],
    base: &ModelConfig,
) -> Result<ModelConfig> {
    let shape = |name: &str| -> Result<&[usize]> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    };
    let emb = shape("encoder.embedding")?;
    let head = shape("decoder.0.head.weight")?;
    let blocks = (0..)
        .take_while(|l| {
            entries
                .iter()
                .any(|(n, _)| *n == format!("decoder.{l}.head.weight"))
        })
        .count();
    let has_running = entries
        .iter()
        .any(|(n, _)| n == "upsampler.norm.running_mean");
    Ok(ModelConfig {
        vocab_size: emb[0],
        model_dim: emb[1],
        feature_dim: head[1],
        latent_dim: shape("posterior.mu.weight")?[1],
        blocks,
        decoder_width: shape("decoder.0.kernel")?[0],
        duration_width: shape("duration.conv.weight")?[0],
        ffn_dim: shape("decoder.0.ffn_in.weight")?[1],
        norm: if has_running {
            NormKind::Batch
        } else {
            NormKind::Layer
        },
        ..base.clone()
    })
}
