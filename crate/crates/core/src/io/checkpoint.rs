//! Binary training checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "HSFCKPT\0"
//! u32      version
//! u64 len  JSON echo {"config": .., "model": ..}
//! u64      completed iterations
//! u32      parameter count, then per parameter (sorted by name):
//!            u32 len + name, u32 ndim, u64 dims[ndim], u64 adam step,
//!            f64 value[n], f64 m[n], f64 v[n]
//! u32      power-iteration vector count, then per vector (sorted by name):
//!            u32 len + name, u64 n, f64 u[n]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Param, ParamStore};
use crate::selfreg::{FusionConfig, Model, SelfRegState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HSFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Echo {
    config: FusionConfig,
    model: Model,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend(x.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &SelfRegState) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let echo = serde_json::to_vec(&Echo {
        config: state.config.clone(),
        model: state.model.clone(),
    })
    .expect("config serializes");
    out.extend((echo.len() as u64).to_le_bytes());
    out.extend(echo);
    out.extend(state.iteration.to_le_bytes());
    out.extend((state.store.len() as u32).to_le_bytes());
    for (name, p) in state.store.iter() {
        put_str(&mut out, name);
        out.extend((p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend(p.t.to_le_bytes());
        put_f64s(&mut out, p.value.data());
        put_f64s(&mut out, p.m.data());
        put_f64s(&mut out, p.v.data());
    }
    let vectors: Vec<_> = state.store.sn_vectors().collect();
    out.extend((vectors.len() as u32).to_le_bytes());
    for (name, u) in vectors {
        put_str(&mut out, name);
        out.extend((u.len() as u64).to_le_bytes());
        put_f64s(&mut out, u);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedPayload {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflows".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SelfRegState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::BadMagic("checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.len()?;
    let echo: Echo = serde_json::from_slice(r.take(n)?)?;
    let iteration = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let t = r.u64()?;
        let numel = shape.iter().product();
        let value = Tensor::new(shape.clone(), r.f64s(numel)?)?;
        let m = Tensor::new(shape.clone(), r.f64s(numel)?)?;
        let v = Tensor::new(shape.clone(), r.f64s(numel)?)?;
        store.insert_param(
            &name,
            Param {
                grad: Tensor::zeros(&shape),
                value,
                m,
                v,
                t,
            },
        );
    }
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let n = r.len()?;
        store.set_sn_vector(&name, r.f64s(n)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingData(bytes.len() - r.pos));
    }
    Ok(SelfRegState {
        config: echo.config,
        model: echo.model,
        store,
        iteration,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, state: &SelfRegState) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_checkpoint(state))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<SelfRegState> {
    decode_checkpoint(&std::fs::read(path)?)
}
