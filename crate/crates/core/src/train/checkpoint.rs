//! Binary checkpoint files.
//!
//! Layout, all integers little-endian u32:
//! magic `VRLMCKPT`, version, parameter count, then per parameter the name
//! length, UTF-8 name, rank, extents and `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::VerLMParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VRLMCKPT";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &VerLMParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.iter().count() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint. Every parameter is inserted unfrozen.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<VerLMParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("parameter count")?;
    let mut params = VerLMParams::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32("extents").map(|e| e as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        params
            .insert(&name, Tensor::new(shape, data)?)
            .map_err(|_| Error::Format(format!("unknown parameter group in {name}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &VerLMParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<VerLMParams> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads `path` into an existing parameter set. Names must match exactly and
/// shapes must agree; freeze flags are kept.
pub fn load_into(params: &mut VerLMParams, path: &Path) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    let want = params.names();
    let got = loaded.names();
    if want != got {
        let missing: Vec<&String> = want.iter().filter(|n| !got.contains(n)).collect();
        let extra: Vec<&String> = got.iter().filter(|n| !want.contains(n)).collect();
        return Err(Error::Format(format!(
            "checkpoint parameters differ from the model (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for (name, t) in loaded.iter() {
        let dst = params.get_mut(name).expect("names checked above");
        if dst.shape() != t.shape() {
            return Err(Error::ShapeDisagreement {
                name: name.to_string(),
                expected: dst.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(t.data());
        dst.zero_grad();
    }
    Ok(())
}
