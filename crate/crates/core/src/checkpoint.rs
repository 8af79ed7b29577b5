//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic        b"BLRP1"
//! u32          config length, then that many bytes of `key = value` text
//! u32          parameter count
//! per param    u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values
//! u8           1 if optimizer state follows, else 0
//! [optimizer]  u64 step, u64 epoch, f64 best validation accuracy (NaN if none),
//!              f64 first moments then f64 second moments, per param in order
//! ```

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 5] = b"BLRP1";

pub fn encode(model: &Model, state: Option<&TrainState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = model.config().to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &dim in value.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        put_values(&mut out, value);
    }
    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            out.extend_from_slice(&s.epoch.to_le_bytes());
            out.extend_from_slice(&s.best_val_accuracy.unwrap_or(f64::NAN).to_le_bytes());
            for m in &s.first_moment {
                put_values(&mut out, m);
            }
            for v in &s.second_moment {
                put_values(&mut out, v);
            }
        }
    }
    out
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Option<TrainState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let config = ModelConfig::from_kv(&r.string()?)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let values = r.f64s(shape.iter().product())?;
        store.add(name, Tensor::new(shape, values)?);
    }
    let state = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let epoch = r.u64()?;
            let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
                store
                    .iter()
                    .map(|(_, _, p)| Tensor::new(p.shape().to_vec(), r.f64s(p.len())?))
                    .collect()
            };
            let first_moment = moments(&mut r)?;
            let second_moment = moments(&mut r)?;
            Some(TrainState {
                step,
                epoch,
                best_val_accuracy: (!best.is_nan()).then_some(best),
                first_moment,
                second_moment,
            })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((Model::with_params(config, store)?, state))
}

pub fn save(path: &Path, model: &Model, state: Option<&TrainState>) -> Result<()> {
    write_atomic(path, &encode(model, state))
}

pub fn load(path: &Path) -> Result<(Model, Option<TrainState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks it against the caller's expected architecture.
pub fn load_expecting(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, Option<TrainState>)> {
    let (model, state) = load(path)?;
    if let Some(exp) = expected {
        let got = model.config();
        if got.d != exp.d || got.vocab_size != exp.vocab_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint has d = {}, vocab_size = {} but the config expects d = {}, vocab_size = {}",
                got.d, got.vocab_size, exp.d, exp.vocab_size
            )));
        }
    }
    Ok((model, state))
}
