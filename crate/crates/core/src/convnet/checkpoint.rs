//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "SICD" | version u32 = 1 | param count u32
//! per param: name len u16 | utf-8 name | rank u8 | dims u32 * rank | f32 data
//! optional: "ADAM" | step u64 | lr, beta1, beta2, eps f64 | count u32
//!           per param: len u32 | m f64 * len | v f64 * len
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BackboneConfig, Model, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::update::{AdamConfig, AdamState};

const MAGIC: &[u8; 4] = b"SICD";
const ADAM_MAGIC: &[u8; 4] = b"ADAM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Param>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.tensor.rank() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(adam) = &self.adam {
            out.extend_from_slice(ADAM_MAGIC);
            out.extend_from_slice(&adam.step_count().to_le_bytes());
            let c = adam.config();
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(adam.len() as u32).to_le_bytes());
            for i in 0..adam.len() {
                let (m, v) = adam.moments(i);
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for x in m.iter().chain(v) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("magic", "expected `SICD`"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt("version", format!("unsupported version {version}")));
        }
        let count = r.u32("param_count")? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = r.u16("name_len")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| corrupt("name", format!("parameter {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && rank > 0)
                .ok_or_else(|| corrupt("dims", format!("invalid shape {shape:?} for `{name}`")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| corrupt("dims", "overflow"))?, "data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| corrupt("dims", e.to_string()))?;
            params.push(Param { name, tensor });
        }
        let adam = if r.remaining() == 0 {
            None
        } else {
            if r.take(4, "adam_magic")? != ADAM_MAGIC {
                return Err(corrupt("adam_magic", "expected `ADAM` or end of file"));
            }
            let step = r.u64("adam_step")?;
            let config = AdamConfig {
                lr: r.f64("adam_lr")?,
                beta1: r.f64("adam_beta1")?,
                beta2: r.f64("adam_beta2")?,
                eps: r.f64("adam_eps")?,
            };
            let n = r.u32("adam_count")? as usize;
            if n != params.len() {
                return Err(corrupt(
                    "adam_count",
                    format!("{n} moment buffers for {} parameters", params.len()),
                ));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for p in &params {
                let len = r.u32("adam_len")? as usize;
                if len != p.tensor.numel() {
                    return Err(corrupt(
                        "adam_len",
                        format!("`{}` has {} values, moments have {len}", p.name, p.tensor.numel()),
                    ));
                }
                m.push(r.f64s(len, "adam_m")?);
                v.push(r.f64s(len, "adam_v")?);
            }
            let names = params.iter().map(|p| p.name.clone()).collect();
            Some(
                AdamState::from_parts(config, step, names, m, v)
                    .map_err(|e| corrupt("adam", e.to_string()))?,
            )
        };
        if r.remaining() != 0 {
            return Err(corrupt("trailer", format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { params, adam })
    }
}

fn corrupt(field: &str, detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        field: field.into(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(corrupt(field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt(field, "overflow"))?, field)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(model: &Model, adam: Option<&AdamState>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        params: model.params().to_vec(),
        adam: adam.cloned(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, config: &BackboneConfig) -> Result<(Model, Option<AdamState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let model = Model::from_params(config.clone(), ckpt.params)?;
    Ok((model, ckpt.adam))
}

/// Hex SHA-256 of the model's parameter block.
pub fn checkpoint_hash(model: &Model) -> String {
    let bytes = Checkpoint {
        params: model.params().to_vec(),
        adam: None,
    }
    .to_bytes();
    hex::encode(Sha256::digest(&bytes))
}
