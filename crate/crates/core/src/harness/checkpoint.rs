//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        7 bytes  "RGSCKPT"
//! version      u32
//! train step   u64
//! config       u64 length + UTF-8 text
//! entries      u64 count, then per entry:
//!   name       u32 length + UTF-8
//!   rank       u32, then rank × u64 extents
//!   frozen     u8
//!   adam step  u64
//!   value      n × f64
//!   moment 1   n × f64
//!   moment 2   n × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 7] = b"RGSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub adam_step: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub train_step: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: String, train_step: u64) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| {
                let (m, v) = p.moments();
                Entry {
                    name: p.name().to_string(),
                    value: p.value().clone(),
                    first_moment: m.clone(),
                    second_moment: v.clone(),
                    adam_step: p.step(),
                    frozen: p.is_frozen(),
                }
            })
            .collect();
        Self {
            config,
            train_step,
            entries,
        }
    }

    /// Writes every entry into the parameter of the same name. The store
    /// must hold exactly the checkpoint's parameter names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store.id(&e.name).map_err(|_| {
                Error::Format(format!(
                    "checkpoint parameter `{}` is not in the model",
                    e.name
                ))
            })?;
            store.restore(
                id,
                e.value.clone(),
                e.first_moment.clone(),
                e.second_moment.clone(),
                e.adam_step,
                e.frozen,
            )?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.train_step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.frozen as u8);
            out.extend_from_slice(&e.adam_step.to_le_bytes());
            for t in [&e.value, &e.first_moment, &e.second_moment] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let train_step = r.u64()?;
        let config = r.string_u64()?;
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad frozen flag {b}"))),
            };
            let adam_step = r.u64()?;
            let n: usize = shape.iter().product();
            let mut tensor = || -> Result<Tensor> {
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Tensor::new(shape.clone(), data)
                    .map_err(|e| Error::Format(format!("`{name}`: {e}")))
            };
            let value = tensor()?;
            let first_moment = tensor()?;
            let second_moment = tensor()?;
            entries.push(Entry {
                name,
                value,
                first_moment,
                second_moment,
                adam_step,
                frozen,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            train_step,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string_u64(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("config text is not UTF-8".into()))
    }
}
