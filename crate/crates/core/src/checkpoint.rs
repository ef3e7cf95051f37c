//! `QBTC` named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QBTC" | version: u32 | count: u32
//! per tensor:
//!   name_len: u32 | name: UTF-8 | rank: u32 | dims: u64 × rank | dtype: u8 | payload
//! dtype 0: f32 × numel
//! dtype 1: f64 × numel
//! dtype 2: u16 codes × numel, then the group sidecar:
//!   bits: u32 | out_neurons: u64 | n_heads: u32 | mode: u8 | bucket_size: u64
//!   | groups: u32 | per group: start: u64 | end: u64 | q0: f64 | q_max: f64
//! ```
//!
//! `mode` is 0 layer-wise, 1 per-head, 2 bucketed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::quant::group::{GroupMode, GroupQuantizedTensor, GroupSpec};
use crate::quant::QuantRange;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QBTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U16Codes = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    /// Stored as f32; held here widened to f64.
    F32(Tensor<f64>),
    F64(Tensor<f64>),
    Codes(GroupQuantizedTensor),
}

impl Entry {
    /// Decoded values.
    pub fn values(&self) -> Tensor<f64> {
        match self {
            Entry::F32(t) | Entry::F64(t) => t.clone(),
            Entry::Codes(q) => q.dequantize(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn from_params(params: &ParamSet, dtype: DType) -> Result<Self> {
        let mut ck = Self::new();
        for p in params.iter() {
            let e = match dtype {
                DType::F32 => Entry::F32(p.value.map(|v| v as f32 as f64)),
                DType::F64 => Entry::F64(p.value.clone()),
                DType::U16Codes => return Err(Error::invalid("code tensors need a group quantizer")),
            };
            ck.push(p.name.clone(), e);
        }
        Ok(ck)
    }

    /// Overwrites the values of every parameter present in the checkpoint.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        for (name, entry) in &self.entries {
            if !params.contains(name) {
                continue;
            }
            let v = entry.values();
            let slot = params.get_mut(name)?;
            if slot.dims() != v.dims() {
                return Err(Error::Format(format!("`{name}`: checkpoint dims {:?}, model dims {:?}", v.dims(), slot.dims())));
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, u32::try_from(self.entries.len()).map_err(|_| Error::Format("too many tensors".into()))?);
        for (name, entry) in &self.entries {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            let dims = match entry {
                Entry::F32(t) | Entry::F64(t) => t.dims().to_vec(),
                Entry::Codes(q) => q.dims.clone(),
            };
            put_u32(&mut out, dims.len() as u32);
            for d in &dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match entry {
                Entry::F32(t) => {
                    out.push(DType::F32 as u8);
                    for &v in t.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Entry::F64(t) => {
                    out.push(DType::F64 as u8);
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Codes(q) => {
                    out.push(DType::U16Codes as u8);
                    for &c in &q.codes {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                    put_u32(&mut out, q.bits as u32);
                    out.extend_from_slice(&(q.spec.out_neurons as u64).to_le_bytes());
                    put_u32(&mut out, q.spec.n_heads as u32);
                    let (mode, bucket) = match q.spec.mode {
                        GroupMode::Layerwise => (0u8, 0u64),
                        GroupMode::PerHead => (1, 0),
                        GroupMode::Bucketed(s) => (2, s as u64),
                    };
                    out.push(mode);
                    out.extend_from_slice(&bucket.to_le_bytes());
                    put_u32(&mut out, q.ranges.len() as u32);
                    for (g, r) in q.spec.groups.iter().zip(&q.ranges) {
                        out.extend_from_slice(&(g.start as u64).to_le_bytes());
                        out.extend_from_slice(&(g.end as u64).to_le_bytes());
                        out.extend_from_slice(&r.q0.to_le_bytes());
                        out.extend_from_slice(&r.q_max.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let bad = |e: Error| Error::Format(format!("`{name}`: {e}"));
            let entry = match r.u8()? {
                0 => {
                    let data = (0..numel).map(|_| r.f32().map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
                    Entry::F32(Tensor::new(dims, data).map_err(bad)?)
                }
                1 => {
                    let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Entry::F64(Tensor::new(dims, data).map_err(bad)?)
                }
                2 => {
                    let codes = (0..numel).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
                    let bits = u8::try_from(r.u32()?).map_err(|_| Error::Format("bit-width out of range".into()))?;
                    let out_neurons = r.u64()? as usize;
                    let n_heads = r.u32()? as usize;
                    let mode = match (r.u8()?, r.u64()?) {
                        (0, _) => GroupMode::Layerwise,
                        (1, _) => GroupMode::PerHead,
                        (2, s) => GroupMode::Bucketed(s as usize),
                        (m, _) => return Err(Error::Format(format!("unknown group mode {m}"))),
                    };
                    let n_groups = r.u32()? as usize;
                    let mut groups = Vec::with_capacity(n_groups);
                    let mut ranges = Vec::with_capacity(n_groups);
                    for _ in 0..n_groups {
                        let (start, end) = (r.u64()? as usize, r.u64()? as usize);
                        let (q0, q_max) = (r.f64()?, r.f64()?);
                        groups.push(start..end);
                        ranges.push(QuantRange::new(q0, q_max, bits).map_err(bad)?);
                    }
                    if out_neurons == 0 || !numel.is_multiple_of(out_neurons) || groups.last().map(|g| g.end) != Some(out_neurons) {
                        return Err(Error::Format(format!("`{name}`: group sidecar does not cover the tensor")));
                    }
                    let max = crate::quant::max_code(bits);
                    if codes.iter().any(|&c| c as u32 > max) {
                        return Err(Error::Format(format!("`{name}`: code exceeds {bits}-bit range")));
                    }
                    let spec = GroupSpec { mode, n_heads, out_neurons, groups };
                    Entry::Codes(GroupQuantizedTensor { dims, codes, ranges, spec, bits })
                }
                t => return Err(Error::Format(format!("`{name}`: unknown dtype tag {t}"))),
            };
            ck.push(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
