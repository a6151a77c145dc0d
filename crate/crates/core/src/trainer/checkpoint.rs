//! Checkpoint file layout, little-endian:
//!
//! magic `CEVC`, version u8, config hash u64, step u64, generator and
//! discriminator optimizer step counts (u64 each), config JSON (u32 length +
//! UTF-8), tensor count u32, then per tensor: name (u16 length + UTF-8),
//! rank u8, dims u32 each, values f64 each.
//!
//! Optimizer moments are stored as tensors named `opt.gen.m.<param>` and so
//! on.

use std::collections::BTreeMap;
use std::path::Path;

use cevae_tensor::{Float, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, Moments};
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::objectives::DiscriminatorConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CEVC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// The part of the configuration that fixes parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ArchitectureConfig {
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ArchitectureConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, NamedTensor>,
    pub gen_opt_steps: u64,
    pub disc_opt_steps: u64,
}

pub const MODEL_PREFIX: &str = "model.";
pub const DISC_PREFIX: &str = "disc.";

fn store_tensors<T: Float>(
    prefix: &str,
    store: &ParamStore<T>,
    out: &mut BTreeMap<String, NamedTensor>,
) {
    for p in store.all() {
        let t = p.tensor();
        out.insert(
            format!("{prefix}{}", p.name()),
            NamedTensor {
                dims: t.dims().to_vec(),
                values: t.to_f64_vec(),
            },
        );
    }
}

fn opt_tensors(prefix: &str, opt: &Adam, out: &mut BTreeMap<String, NamedTensor>) {
    for (name, st) in &opt.state {
        let dims = vec![st.m.len()];
        out.insert(
            format!("{prefix}m.{name}"),
            NamedTensor {
                dims: dims.clone(),
                values: st.m.clone(),
            },
        );
        out.insert(
            format!("{prefix}v.{name}"),
            NamedTensor {
                dims,
                values: st.v.clone(),
            },
        );
    }
}

impl Checkpoint {
    pub fn capture<T: Float>(
        config: &ArchitectureConfig,
        step: u64,
        model: &ParamStore<T>,
        disc: &ParamStore<T>,
        gen_opt: &Adam,
        disc_opt: &Adam,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        store_tensors(MODEL_PREFIX, model, &mut tensors);
        store_tensors(DISC_PREFIX, disc, &mut tensors);
        opt_tensors("opt.gen.", gen_opt, &mut tensors);
        opt_tensors("opt.disc.", disc_opt, &mut tensors);
        Self {
            config: config.clone(),
            step,
            tensors,
            gen_opt_steps: gen_opt.t,
            disc_opt_steps: disc_opt.t,
        }
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    /// Copies `<prefix><name>` into every parameter of `store`.
    pub fn restore_store<T: Float>(&self, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for p in store.all() {
            let key = format!("{prefix}{}", p.name());
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| CoreError::Checkpoint(format!("checkpoint lacks tensor {key}")))?;
            if t.dims != p.dims() {
                return Err(CoreError::Checkpoint(format!(
                    "{key} has shape {:?}, model expects {:?}",
                    t.dims,
                    p.dims()
                )));
            }
            p.set(t.values.iter().map(|&v| T::of(v)).collect());
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, prefix: &str, opt: &mut Adam, steps: u64) {
        opt.t = steps;
        opt.state.clear();
        let m_prefix = format!("{prefix}m.");
        for (key, m) in self.tensors.range(m_prefix.clone()..) {
            let Some(name) = key.strip_prefix(&m_prefix) else {
                break;
            };
            if let Some(v) = self.tensors.get(&format!("{prefix}v.{name}")) {
                opt.state.insert(
                    name.to_string(),
                    Moments {
                        m: m.values.clone(),
                        v: v.values.clone(),
                    },
                );
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config_hash().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.gen_opt_steps.to_le_bytes());
        out.extend_from_slice(&self.disc_opt_steps.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serialises");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CoreError::format(0, "bad magic, not a checkpoint"));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let hash = r.u64()?;
        let step = r.u64()?;
        let gen_opt_steps = r.u64()?;
        let disc_opt_steps = r.u64()?;
        let json_len = r.u32()? as usize;
        let json_at = r.pos;
        let config: ArchitectureConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| CoreError::format(json_at, format!("config JSON: {e}")))?;
        if config.hash() != hash {
            return Err(CoreError::format(
                5,
                "stored config hash does not match the stored config",
            ));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CoreError::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| CoreError::format(r.pos, "tensor too large"))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, NamedTensor { dims, values });
        }
        if r.pos != bytes.len() {
            return Err(CoreError::format(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self {
            config,
            step,
            tensors,
            gen_opt_steps,
            disc_opt_steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| CoreError::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CoreError::format(self.pos, format!("truncated, needed {n} more bytes"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
