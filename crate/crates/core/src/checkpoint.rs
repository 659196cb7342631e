//! `RFFZ` tensor container.
//!
//! Layout, all integers little-endian: magic `RFFZ`, version `u32`, tensor
//! count `u32`, then per tensor: name length `u32`, UTF-8 name, dtype tag
//! `u8` (0 real, 1 complex), rank `u32`, extents `u64` each, payload of
//! `f64` values (complex as interleaved re/im). Tensors are stored in name
//! order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;

use crate::autodiff::{AdamState, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{CTensor, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"RFFZ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    Real(Tensor),
    Complex(CTensor),
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::Real(_) => DType::Real64,
            Stored::Complex(_) => DType::Complex128,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Stored::Real(t) => t.shape(),
            Stored::Complex(c) => c.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Stored>,
}

fn adam_names(name: &str) -> [String; 3] {
    [format!("adam.m.{name}"), format!("adam.v.{name}"), format!("adam.step.{name}")]
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: &str, t: Stored) -> Result<()> {
        if name.is_empty() || name.len() > u32::MAX as usize {
            return Err(Error::Checkpoint("tensor names must be non-empty".into()));
        }
        if self.tensors.insert(name.to_string(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        Ok(())
    }

    pub fn insert_real(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.insert(name, Stored::Real(t))
    }

    pub fn get(&self, name: &str) -> Option<&Stored> {
        self.tensors.get(name)
    }

    pub fn real(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(Stored::Real(t)) => Ok(t),
            Some(Stored::Complex(_)) => Err(Error::Checkpoint(format!("`{name}` is complex"))),
            None => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }

    /// Stores every parameter with its Adam moments and step count.
    pub fn insert_params(&mut self, p: &ParamSet) -> Result<()> {
        for (name, t) in p.iter() {
            self.insert_real(name, t.clone())?;
            let st = p.state(name).expect("state for every parameter");
            let [m, v, s] = adam_names(name);
            self.insert_real(&m, st.m.clone())?;
            self.insert_real(&v, st.v.clone())?;
            self.insert_real(&s, Tensor::scalar(st.step as f64))?;
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`, with optimizer state
    /// when present.
    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for name in self.names().filter(|n| n.starts_with(prefix) && !n.starts_with("adam.")) {
            p.insert(name, self.real(name)?.clone())?;
            let [m, v, s] = adam_names(name);
            if let (Ok(m), Ok(v), Ok(s)) = (self.real(&m), self.real(&v), self.real(&s)) {
                p.set_state(name, AdamState { m: m.clone(), v: v.clone(), step: s.item() as u64 })?;
            }
        }
        if p.is_empty() {
            return Err(Error::Checkpoint(format!("no tensors with prefix `{prefix}`")));
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match t.dtype() {
                DType::Real64 => 0,
                DType::Complex128 => 1,
            });
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Stored::Real(r) => r.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::Complex(c) => c.data().iter().for_each(|z| {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not an RFFZ file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
            let stored = match tag {
                0 => Stored::Real(Tensor::new(shape, r.f64s(n)?)?),
                1 => {
                    let raw = r.f64s(n.checked_mul(2).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
                    let data = raw.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
                    Stored::Complex(CTensor::new(shape, data)?)
                }
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} for `{name}`"))),
            };
            ck.insert(&name, stored)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so an interrupted save leaves any
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("rffz.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_real("b", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25)).unwrap();
        ck.insert_real("a", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        let z = CTensor::new(vec![2], vec![Complex64::new(1.0, -2.0), Complex64::new(0.5, 3.0)]).unwrap();
        ck.insert("c", Stored::Complex(z)).unwrap();
        ck
    }

    #[test]
    fn round_trip_bytes() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"RFFZ");
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn params_with_state() {
        let mut p = ParamSet::new();
        p.insert("mlp.0.weight", Tensor::full(&[2, 2], 0.5)).unwrap();
        p.set_state("mlp.0.weight", AdamState { m: Tensor::full(&[2, 2], 0.1), v: Tensor::full(&[2, 2], 0.2), step: 7 }).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert_params(&p).unwrap();
        assert_eq!(ck.params("mlp.").unwrap(), p);
        assert!(ck.params("encoder.").is_err());
    }
}
