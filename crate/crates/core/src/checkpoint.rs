//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "INTROLM\0"
//! version u32      currently 1
//! n_meta  u32      then n_meta x (key: str, value: str)
//! n_ten   u32      then n_ten x tensor
//! str     = u32 byte length + UTF-8 bytes
//! tensor  = name: str, dtype: u8 (0 = f32, 1 = f64), ndim: u32,
//!           dims: ndim x u64, data: raw little-endian elements
//! ```
//!
//! Backbone entries live under the `backbone.` namespace and introspection
//! entries under `intro.`, so the two files compose without collisions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"INTROLM\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let n: usize = self.shape.iter().product();
        let size = self.dtype.size();
        if self.bytes.len() != n * size {
            return Err(Error::Format(format!("tensor {} has truncated data", self.name)));
        }
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c).as_f64())).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<RawTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn tensors(&self) -> &[RawTensor] {
        &self.tensors
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let name = name.into();
        self.tensors.retain(|r| r.name != name);
        self.tensors.push(RawTensor { name, dtype: T::DTYPE, shape: t.shape().to_vec(), bytes });
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    /// Loads `name`, converting the stored precision to `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?
            .to_tensor()
    }

    /// Adds every entry of `other`, replacing duplicates.
    pub fn merge(&mut self, other: Checkpoint) {
        for (k, v) in other.meta {
            self.set_meta(k, v);
        }
        for t in other.tensors {
            self.tensors.retain(|r| r.name != t.name);
            self.tensors.push(t);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype {code}")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(n * dtype.size())?.to_vec();
            ck.tensors.push(RawTensor { name, dtype, shape, bytes });
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const BACKBONE_NS: &str = "backbone.";

impl<T: Scalar> crate::backbone::BackboneWeights<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (k, v) in self.config.to_pairs() {
            ck.set_meta(format!("{BACKBONE_NS}{k}"), v);
        }
        for (name, p) in self.named_params() {
            ck.push(format!("{BACKBONE_NS}{name}"), p.tensor());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = crate::backbone::BackboneConfig::from_lookup(|k| ck.meta(&format!("{BACKBONE_NS}{k}")).map(String::from))?;
        let mut w = Self::init(config, 0)?;
        for (name, p) in w.named_params_mut() {
            let t: Tensor<T> = ck.get(&format!("{BACKBONE_NS}{name}"))?;
            if t.shape() != p.tensor().shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *p = crate::backbone::Param::new(t);
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneWeights};

    fn tiny() -> BackboneConfig {
        BackboneConfig { vocab_size: 12, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 16, rope_base: 10_000.0 }
    }

    #[test]
    fn backbone_round_trip_is_bit_exact() {
        let w = BackboneWeights::<f32>::init(tiny(), 9).unwrap();
        let bytes = w.to_checkpoint().to_bytes();
        let back = BackboneWeights::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert!(w.bit_eq(&back));
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.set_meta("a", "b");
        ck.push("t", &Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b.len(), 8 + 4 + 4 + (4 + 1 + 4 + 1) + 4 + (4 + 1) + 1 + 4 + 8 + 8);
        assert_eq!(&b[b.len() - 8..b.len() - 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let w = BackboneWeights::<f32>::init(tiny(), 1).unwrap();
        let mut bytes = w.to_checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn casts_on_load() {
        let w = BackboneWeights::<f32>::init(tiny(), 2).unwrap();
        let w64 = BackboneWeights::<f64>::from_checkpoint(&w.to_checkpoint()).unwrap();
        assert_eq!(w64.embed.tensor().data()[3], f64::from(w.embed.tensor().data()[3]));
    }
}
