use std::path::Path;

use super::Utterance;
use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"DCORP\0";
const VERSION: u32 = 1;

pub fn encode_corpus(corpus: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for u in corpus {
        out.extend_from_slice(&(u.tokens() as u32).to_le_bytes());
        for &id in &u.ids {
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        for &d in &u.durations {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let (t, f) = (u.frames.shape()[0], u.frames.shape()[1]);
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(f as u32).to_le_bytes());
        for &x in u.frames.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            kind: "corpus",
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

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_corpus(buf: &[u8]) -> Result<Vec<Utterance>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let k = r.u32("token count")? as usize;
        let ids = (0..k)
            .map(|_| r.u32("token id").map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let durs = (0..k)
            .map(|_| r.u32("duration"))
            .collect::<Result<Vec<_>>>()?;
        let at = r.pos;
        let t = r.u32("frame count")? as usize;
        let f = r.u32("feature dim")? as usize;
        let total: u64 = durs.iter().map(|&d| d as u64).sum();
        if total != t as u64 {
            r.pos = at;
            return Err(r.fail(format!("frame count {t} != duration sum {total}")));
        }
        let bytes = t
            .checked_mul(f)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail("frame block too large"))?;
        let raw = r.take(bytes, "frames")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Utterance::new(ids, durs, Tensor::new(vec![t, f], data)?)?);
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(out)
}

pub fn save_corpus(corpus: &[Utterance], path: &Path) -> Result<()> {
    std::fs::write(path, encode_corpus(corpus)).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&buf)
}
