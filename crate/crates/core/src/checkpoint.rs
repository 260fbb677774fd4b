//! The "YALAB" named tensor table shared by every persisted model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"YALAB"  u32 version  u32 kind  u32 n_tensors
//! repeated n_tensors times:
//!     u32 name_len  name (utf-8)  u32 rank  u64 dims[rank]  f64 data[prod(dims)]
//! ```
//!
//! `kind` identifies the stage or model family (see [`ModelKind`]).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"YALAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ModelKind {
    BaseStage = 0,
    SrStage1 = 1,
    SrStage2 = 2,
    Value = 10,
    ScoreWeights = 20,
    FidelityRanker = 21,
    Trajectory = 30,
}

impl ModelKind {
    pub fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            0 => Self::BaseStage,
            1 => Self::SrStage1,
            2 => Self::SrStage2,
            10 => Self::Value,
            20 => Self::ScoreWeights,
            21 => Self::FidelityRanker,
            30 => Self::Trajectory,
            other => return Err(Error::Format(format!("unknown model kind tag {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorTable {
    pub kind: ModelKind,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl TensorTable {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: ArrayD<f64>) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, ArrayD::from_elem(IxDyn(&[]), v));
    }

    pub fn push_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(
            name,
            ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap(),
        );
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} missing from table")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::Format(format!("{name:?} is not a scalar")));
        }
        Ok(*t.iter().next().unwrap())
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!("{name:?} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.iter().copied().collect())
    }

    pub fn encode(&self, out: &mut impl Write) -> Result<()> {
        let wrap = |e| Error::io("<yalab>", e);
        out.write_all(MAGIC).map_err(wrap)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(wrap)?;
        out.write_all(&(self.kind as u32).to_le_bytes())
            .map_err(wrap)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())
            .map_err(wrap)?;
        for (name, t) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())
                .map_err(wrap)?;
            out.write_all(name.as_bytes()).map_err(wrap)?;
            out.write_all(&(t.ndim() as u32).to_le_bytes())
                .map_err(wrap)?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes()).map_err(wrap)?;
            }
            // row-major regardless of the in-memory layout
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf).map_err(wrap)?;
        }
        Ok(())
    }

    pub fn decode(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a YALAB table".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported YALAB version {version}"
            )));
        }
        let kind = ModelKind::from_u32(read_u32(&mut r)?)?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = dims.iter().product();
            let mut raw = vec![0u8; count * 8];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { kind, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.encode(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes[..])
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated YALAB table".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_fixed() {
        let mut t = TensorTable::new(ModelKind::SrStage1);
        t.push_scalar("x", 1.5);
        let mut buf = Vec::new();
        t.encode(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"YALAB");
        assert_eq!(&buf[5..9], &1u32.to_le_bytes());
        assert_eq!(&buf[9..13], &1u32.to_le_bytes());
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        // name_len, "x", rank 0, then one f64
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(buf[21], b'x');
        assert_eq!(&buf[22..26], &0u32.to_le_bytes());
        assert_eq!(&buf[26..34], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 34);
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorTable::decode(&b"NOTYA"[..]).is_err());
        let mut t = TensorTable::new(ModelKind::Value);
        t.push_vec("v", &[1.0, 2.0]);
        let mut buf = Vec::new();
        t.encode(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(TensorTable::decode(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let count: usize = dims.iter().product();
            let data: Vec<f64> = (0..count).map(|i| (i as f64 + seed as f64).sin()).collect();
            let mut t = TensorTable::new(ModelKind::BaseStage);
            t.push("w", ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
            let mut buf = Vec::new();
            t.encode(&mut buf).unwrap();
            prop_assert_eq!(TensorTable::decode(&buf[..]).unwrap(), t);
        }
    }
}
