//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `BGMCKPT1`, format version (u32), model config hash (u64),
//! model config, optimizer step (u64), metadata as string pairs, then every
//! parameter with its name, shape, group, kind, values and both Adam moments.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::basenet::BaseNetConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Group, ParamKind};
use crate::refiner::Kernel;

pub const MAGIC: &[u8; 8] = b"BGMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// A model snapshot plus free-form string metadata (training progress).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, meta: Vec::new() }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.meta.push((key.into(), value)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        let cfg = &self.model.config;
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(cfg.hash());
        for c in cfg.base.stage_channels {
            w.u32(c as u32);
        }
        w.u32(cfg.base.aspp_channels as u32);
        w.u8(match cfg.kernel {
            Kernel::K3 => 3,
            Kernel::K1 => 1,
        });
        w.u64(cfg.seed);
        let store = &self.model.store;
        w.u64(store.step());
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(store.len() as u32);
        for p in store.entries() {
            w.str(&p.name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u32(d as u32);
            }
            w.u8(p.group.index() as u8);
            w.u8(match p.kind {
                ParamKind::Trainable => 0,
                ParamKind::RunningStat => 1,
            });
            for buf in [&p.value, &p.adam_m, &p.adam_v] {
                for &v in buf.iter() {
                    w.f64(v);
                }
            }
        }
        w.0
    }

    /// Decodes a checkpoint, rebuilding the model from its stored config.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hash = r.u64()?;
        let mut stage_channels = [0usize; 4];
        for c in &mut stage_channels {
            *c = r.u32()? as usize;
        }
        let aspp_channels = r.u32()? as usize;
        let kernel = match r.u8()? {
            3 => Kernel::K3,
            1 => Kernel::K1,
            k => return Err(Error::Checkpoint(format!("unknown refiner kernel {k}"))),
        };
        let seed = r.u64()?;
        let config = ModelConfig {
            base: BaseNetConfig {
                stage_channels,
                aspp_channels,
            },
            kernel,
            seed,
        };
        if config.hash() != hash {
            return Err(Error::ConfigHashMismatch {
                expected: hash,
                found: config.hash(),
            });
        }
        let mut model = Model::new(config)?;
        model.store.set_step(r.u64()?);
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        let n = r.u32()? as usize;
        if n != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n} parameters, architecture expects {}",
                model.store.len()
            )));
        }
        for p in model.store.entries_mut() {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let group = Group::from_index(r.u8()? as usize).ok_or_else(|| Error::Checkpoint("bad group".into()))?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::RunningStat,
                k => return Err(Error::Checkpoint(format!("bad parameter kind {k}"))),
            };
            if name != p.name || shape != p.shape || group != p.group || kind != p.kind {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: stored {name} {shape:?}, expected {} {:?}",
                    p.name, p.shape
                )));
            }
            for buf in [&mut p.value, &mut p.adam_m, &mut p.adam_v] {
                for v in buf.iter_mut() {
                    *v = r.f64()?;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model, meta })
    }

    /// Decodes and requires the stored architecture to match `expected`.
    pub fn decode_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let ck = Self::decode(bytes)?;
        if ck.model.config.hash() != expected.hash() {
            return Err(Error::ConfigHashMismatch {
                expected: expected.hash(),
                found: ck.model.config.hash(),
            });
        }
        Ok(ck)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut m = Model::new(ModelConfig::tiny(9)).unwrap();
        m.store.set_step(17);
        m.store.entries_mut()[3].adam_m[0] = 0.125;
        let mut ck = Checkpoint::new(m);
        ck.set_meta("stage", "2");
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.model.store, ck.model.store);
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.meta("stage"), Some("2"));
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = Checkpoint::new(Model::new(ModelConfig::tiny(1)).unwrap()).encode();
        assert!(matches!(Checkpoint::decode(&bytes[..100]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        // tamper with the stored hash
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::ConfigHashMismatch { .. })));
        assert!(matches!(
            Checkpoint::decode_expecting(&bytes, &ModelConfig::default()),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
