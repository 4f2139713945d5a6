//! Binary checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic    b"FKNT"
//! version  u32 (= 1)
//! config   u32 byte length, UTF-8 `key = value` lines
//! meta     u32 count, then per entry: string key, string value
//! params   tensor list
//! extra    tensor list (optimizer state and other named tensors)
//!
//! string       u32 byte length, UTF-8 bytes
//! tensor list  u32 count, then per tensor: string name, u32 rank,
//!              rank x u64 dims, prod(dims) x f64 values
//! ```

use std::path::Path;

use super::{build, ForkNet, ForkNetConfig};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FKNT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ForkNetConfig,
    pub params: ParamStore<f64>,
    pub meta: Vec<(String, String)>,
    pub extra: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(config: ForkNetConfig, params: ParamStore<f64>) -> Self {
        Self {
            config,
            params,
            meta: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f64>> {
        self.extra.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, p) in self.params.iter() {
            put_tensor(&mut out, name, &p.value);
        }
        put_u32(&mut out, self.extra.len() as u32);
        for (name, t) in &self.extra {
            put_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = ForkNetConfig::from_text(&r.string()?)?;
        let meta = (0..r.u32()?)
            .map(|_| Ok((r.string()?, r.string()?)))
            .collect::<Result<_>>()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            params.add(name, t)?;
        }
        let extra = (0..r.u32()?).map(|_| r.tensor()).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            params,
            meta,
            extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the layout from the stored config and checks that the stored
    /// parameters match it name for name and shape for shape.
    pub fn restore(&self) -> Result<(ForkNet<f64>, ParamStore<f64>)> {
        let (net, mut store) = build::<f64>(&self.config, 0)?;
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if stored.value.shape() != store.value(id).shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    stored.value.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = stored.value.clone();
        }
        Ok((net, store))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f64>) {
    put_str(out, name);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f64>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension overflow".into())))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Format(format!("tensor {name}: shape {shape:?} exceeds the file")))?;
        let data = self
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}
