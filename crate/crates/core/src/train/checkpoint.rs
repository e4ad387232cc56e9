//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `RSCKPT01`, `u32` format version, length-prefixed model
//! config JSON and its hex SHA-256, `u64` epoch and step, then a
//! name-indexed list of `f32` tensors (name, kind code, four dims, data),
//! then the optimizer step count and per-tensor Adam moments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Param, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::train::optim::Adam;

const MAGIC: &[u8; 8] = b"RSCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, epoch: u64, step: u64, params: &ParamStore<f32>, adam: &Adam<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            config_hash: config.hash(),
            epoch,
            step,
            params: params.clone(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, FORMAT_VERSION);
        put_str(&mut b, &serde_json::to_string(&self.config).expect("config serializes"));
        put_str(&mut b, &self.config_hash);
        put_u64(&mut b, self.epoch);
        put_u64(&mut b, self.step);
        put_u32(&mut b, self.params.len() as u32);
        for p in self.params.iter() {
            put_str(&mut b, &p.name);
            b.push(p.kind.code());
            for d in p.value.shape().dims() {
                put_u32(&mut b, d as u32);
            }
            put_f32s(&mut b, p.value.data());
        }
        put_u64(&mut b, self.adam.t);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_u32(&mut b, m.len() as u32);
            put_f32s(&mut b, m);
            put_f32s(&mut b, v);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version} unsupported")));
        }
        let json = r.string()?;
        let config: ModelConfig = serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config_hash = r.string()?;
        if config.hash() != config_hash {
            return Err(Error::HashMismatch {
                expected: config_hash,
                actual: config.hash(),
            });
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let kind = ParamKind::from_code(r.u8()?).ok_or_else(|| corrupt("unknown parameter kind"))?;
            let d: Vec<usize> = (0..4).map(|_| r.u32().map(|x| x as usize)).collect::<Result<_>>()?;
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let data = r.f32s(shape.numel())?;
            params.push(Param {
                name,
                kind,
                value: Tensor::from_vec(shape, data)?,
                grad: vec![0.0; shape.numel()],
            });
        }
        let t = r.u64()?;
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let n = r.u32()? as usize;
            m.push(r.f32s(n)?);
            v.push(r.f32s(n)?);
        }
        if r.at != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            config_hash,
            epoch,
            step,
            params: ParamStore::from_params(params),
            adam: Adam { t, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds the model and checks that every declared parameter is present
    /// with the declared shape.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.config.clone())?;
        if model.specs().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model declares {}",
                self.params.len(),
                model.specs().len()
            )));
        }
        for (spec, p) in model.specs().iter().zip(self.params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} ({}) does not match declared {} ({})",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(model)
    }
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {what}"))
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.b[self.at..end];
        self.at = end;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_reject_corruption() {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg.clone()).unwrap();
        let store = model.init_params::<f32>(3);
        let ck = Checkpoint::new(&cfg, 2, 40, &store, &Adam::new(&store));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        back.model().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
