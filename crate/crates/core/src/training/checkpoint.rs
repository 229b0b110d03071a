//! Named-tensor checkpoint files.
//!
//! Layout, all little-endian: magic `CSMA`, version `u32`, entry count
//! `u32`, then per entry a `u16` name length, the UTF-8 name, `u8` ndim,
//! `u32` dims and the values as `f32`.
//!
//! Non-tensor state (step counters, the config snapshot) is stored as
//! byte-valued tensors under `meta/`; optimizer moments under `opt/`.

use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::numerics::{Float, OptimizerState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSMA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        let t = Tensor::new(&[bytes.len()], bytes.iter().map(|&b| b as Float).collect()).expect("1-d");
        self.push(name, t);
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.require(name)?
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("entry {name:?} is not byte-valued")))
                }
            })
            .collect()
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_bytes(name, &bytes);
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let b = self.bytes(name)?;
        if b.len() % 8 != 0 {
            bail!(Format, "entry {name:?} is not a u64 array");
        }
        Ok(b.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.ndim() > u8::MAX as usize {
                bail!(Contract, "entry {name:?} cannot be encoded");
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
            ck.push(name, t);
        }
        if r.pos != buf.len() {
            bail!(Format, "{} trailing bytes after the last entry", buf.len() - r.pos);
        }
        Ok(ck)
    }

    /// Write atomically via a sibling temp file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("csma.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn add_params(&mut self, store: &ParamStore) {
        for id in store.ids() {
            self.push(store.name(id), store.get(id).clone());
        }
    }

    /// Copy every parameter of `store` out of the checkpoint. Names and
    /// shapes must all match.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.require(&name)?;
            if t.shape() != store.get(id).shape() {
                bail!(
                    Config,
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                );
            }
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn add_optimizer(&mut self, store: &ParamStore, opt: &OptimizerState) {
        for id in store.ids() {
            let shape = store.get(id).shape();
            let name = store.name(id);
            let m = Tensor::new(shape, opt.m[id.0].clone()).expect("moment shape");
            let v = Tensor::new(shape, opt.v[id.0].clone()).expect("moment shape");
            self.push(format!("opt/m/{name}"), m);
            self.push(format!("opt/v/{name}"), v);
        }
        self.push_u64s("opt/t", &opt.t);
        self.push_u64s("opt/step", &[opt.step]);
    }

    pub fn load_optimizer(&self, store: &ParamStore, opt: &mut OptimizerState) -> Result<()> {
        let t = self.u64s("opt/t")?;
        if t.len() != store.len() {
            bail!(Format, "optimizer state covers {} parameters, model has {}", t.len(), store.len());
        }
        for id in store.ids() {
            let name = store.name(id);
            let m = self.require(&format!("opt/m/{name}"))?;
            let v = self.require(&format!("opt/v/{name}"))?;
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                bail!(Format, "optimizer moments for {name} have the wrong shape");
            }
            opt.m[id.0] = m.data().to_vec();
            opt.v[id.0] = v.data().to_vec();
        }
        opt.t = t;
        opt.step = *self
            .u64s("opt/step")?
            .first()
            .ok_or_else(|| Error::Format("empty opt/step".into()))?;
        Ok(())
    }
}
