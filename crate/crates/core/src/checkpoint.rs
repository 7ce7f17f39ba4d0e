//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OMGF" | u32 version | u64 n | n bytes JSON metadata
//! u32 count | count x param
//! u8 has_optimizer | [f64 momentum | u64 steps | count x (u8 present | tensor)]
//! param  = u16 name_len | name | u8 kind | tensor
//! tensor = u8 dtype (0 = f32) | u8 rank | rank x u64 extent | raw values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use omg_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::model::OmgFuser;
use crate::params::{ParamKind, ParamStore};
use crate::train::Sgd;

pub const MAGIC: &[u8; 4] = b"OMGF";
pub const VERSION: u32 = 1;

/// Training progress stored with the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Serialized training settings, kept for resume.
    pub train_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config: ModelConfig,
    pub streams: Vec<String>,
    pub seed: u64,
    pub state: TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub params: Vec<(String, ParamKind, Tensor<f32>)>,
    /// Momentum, step count and one optional buffer per parameter.
    pub optimizer: Option<(f64, u64, Vec<Option<Tensor<f32>>>)>,
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(0);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let dtype = self.u8()?;
        if dtype != 0 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        Ok(Tensor::new(shape, data)?)
    }
}

impl Checkpoint {
    pub fn from_store(meta: Meta, store: &ParamStore<f32>, optimizer: Option<&Sgd>) -> Self {
        let params = store.ids().map(|id| (store.name(id).to_string(), store.kind(id), store.get(id).clone())).collect();
        let optimizer = optimizer.map(|o| (o.momentum, o.steps, o.buffers.clone()));
        Checkpoint { meta, params, optimizer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, kind, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            write_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some((momentum, steps, buffers)) => {
                if buffers.len() != self.params.len() {
                    return Err(Error::Invariant(format!("{} optimizer buffers for {} parameters", buffers.len(), self.params.len())));
                }
                out.push(1);
                out.extend_from_slice(&momentum.to_le_bytes());
                out.extend_from_slice(&steps.to_le_bytes());
                for b in buffers {
                    match b {
                        None => out.push(0),
                        Some(t) => {
                            out.push(1);
                            write_tensor(&mut out, t);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let n = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(n)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("unknown parameter kind {k}"))),
            };
            params.push((name, kind, r.tensor()?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let momentum = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let steps = r.u64()?;
                let mut buffers = Vec::with_capacity(count);
                for _ in 0..count {
                    buffers.push(if r.u8()? == 1 { Some(r.tensor()?) } else { None });
                }
                Some((momentum, steps, buffers))
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
        Self::from_bytes(&buf)
    }

    /// Copies the stored values into `store`, which must hold exactly the
    /// same parameter names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Config(format!("checkpoint holds {} parameters, model has {}", self.params.len(), store.len())));
        }
        for (name, _, t) in &self.params {
            store.set_by_name(name, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the metadata and loads the weights.
    /// With `expected`, a differing configuration is rejected with the list
    /// of differing fields.
    pub fn instantiate(&self, expected: Option<&ModelConfig>) -> Result<(OmgFuser, ParamStore<f32>)> {
        if let Some(e) = expected {
            let diff = e.diff(&self.meta.config);
            if !diff.is_empty() {
                return Err(Error::Config(format!("checkpoint config differs in: {}", diff.join(", "))));
            }
        }
        let (model, mut store) = OmgFuser::new(self.meta.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut store)?;
        Ok((model, store))
    }

    pub fn optimizer(&self) -> Option<Sgd> {
        self.optimizer.as_ref().map(|(m, s, b)| Sgd { momentum: *m, buffers: b.clone(), steps: *s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamSpec;

    fn sample() -> (Checkpoint, ParamStore<f32>) {
        let cfg = ModelConfig::tiny(vec![StreamSpec::new("a", 1)]);
        let (_, store) = OmgFuser::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut opt = Sgd::new(0.9, store.len());
        opt.buffers[1] = Some(Tensor::full(store.get(crate::ParamId(1)).shape().to_vec(), f32::from_bits(0x7fc0_0001)));
        opt.steps = 7;
        let meta = Meta { streams: cfg.stream_names(), config: cfg, seed: 3, state: TrainState { epoch: 2, ..Default::default() } };
        (Checkpoint::from_store(meta, &store, Some(&opt)), store)
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta, ck.meta);
        let nan = back.optimizer.as_ref().unwrap().2[1].as_ref().unwrap().data()[0];
        assert_eq!(nan.to_bits(), 0x7fc0_0001);
    }

    #[test]
    fn version_and_truncation_are_rejected() {
        let (ck, _) = sample();
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn mismatched_config_names_fields() {
        let (ck, store) = sample();
        let (_, loaded) = ck.instantiate(None).unwrap();
        for id in store.ids() {
            assert_eq!(loaded.get(id), store.get(id));
        }
        let mut other = ck.meta.config.clone();
        other.dim = 16;
        other.heads = 4;
        let err = ck.instantiate(Some(&other)).unwrap_err().to_string();
        assert!(err.contains("dim") && err.contains("heads"), "{err}");
    }
}
