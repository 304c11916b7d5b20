//! Binary checkpoint format.
//!
//! ```text
//! "RLSO"                      magic
//! u32                         format version
//! u32 + bytes                 model config as TOML
//! u64                         run seed
//! u64                         training step
//! u32                         tensor count
//! per tensor:
//!   u8                        0 = parameter, 1 = buffer
//!   u32 + bytes               name (UTF-8)
//!   u32 + u64 * ndim          shape
//!   f64 * prod(shape)         payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::config::ModelConfig;
use super::network::Relso;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RLSO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Relso,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = toml::to_string(&self.model.config).map_err(|e| Error::Config(e.to_string()))?;
        put_bytes(&mut out, cfg.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let p = &self.model.params;
        let entries: Vec<(u8, &str, &Tensor)> =
            p.params().map(|(n, t)| (0u8, n, t)).chain(p.buffers().map(|(n, t)| (1u8, n, t))).collect();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (kind, name, t) in entries {
            out.push(kind);
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { expected: FORMAT_VERSION, found: version });
        }
        let cfg_text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Corrupt("config is not UTF-8".into()))?;
        let config: ModelConfig =
            toml::from_str(cfg_text).map_err(|e| Error::Corrupt(format!("config does not parse: {e}")))?;
        config.validate()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Corrupt(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` payload truncated")))?;
            let data: Vec<f64> =
                r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            match kind {
                0 => params.insert(name, t)?,
                1 => params.insert_buffer(name, t)?,
                k => return Err(Error::Corrupt(format!("unknown tensor kind {k}"))),
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        params.set_step(step);
        let model = Relso { config, params };
        model.check_layout()?;
        Ok(Self { model, seed, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Relso {
    /// Verifies that the parameter set matches a fresh model of the same config.
    fn check_layout(&self) -> Result<()> {
        let fresh = Relso::new(self.config.clone(), 0)?;
        let names = |p: &ParamStore| -> Vec<(String, Vec<usize>)> {
            p.params().chain(p.buffers()).map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
        };
        if names(&fresh.params) != names(&self.params) {
            return Err(Error::Corrupt("tensor set does not match the model config".into()));
        }
        Ok(())
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
