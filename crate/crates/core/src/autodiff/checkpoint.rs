//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "SQTGCKPT"
//! version    u32 LE   (currently 1)
//! precision  u8       bytes per value: 4 or 8
//! count      u32 LE   number of parameters
//! repeated `count` times, in registration order:
//!   name_len u32 LE, name (UTF-8)
//!   ndim     u32 LE, extents (u64 LE each)
//!   values   product(extents) little-endian floats of `precision` bytes
//! ```
//!
//! Optimizer slots and gradients are not stored.

use std::path::Path;

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQTGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn values<T: Scalar>(&mut self, vals: &[T]) {
        for &v in vals {
            v.write_le(&mut self.buf);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    /// Reads `n` values stored at `precision` bytes each, converting to `T`.
    pub fn values<T: Scalar>(&mut self, n: usize, precision: u8) -> Result<Vec<T>> {
        let raw = self.take(n * precision as usize)?;
        Ok(match precision {
            4 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            8 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            p => return Err(Error::Format(format!("unsupported precision {p}"))),
        })
    }

    pub fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(T::BYTES);
    w.u32(store.len() as u32);
    for p in store.params() {
        w.str(&p.name);
        w.u32(p.value.shape().len() as u32);
        for &e in p.value.shape() {
            w.u64(e as u64);
        }
        w.values(p.value.data());
    }
    w.buf
}

/// Decodes into a fresh store; values are converted when the file precision differs from `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let precision = r.u8()?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let vals = r.values(n, precision)?;
        store.register(name, Tensor::new(shape, vals)?)?;
    }
    if !r.finished() {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Copies values from `loaded` into `store`, requiring identical names and shapes.
pub fn restore_into<T: Scalar>(store: &mut ParamStore<T>, loaded: &ParamStore<T>) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (dst, src) in store.params_mut().iter_mut().zip(loaded.params()) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(Error::Mismatch(format!(
                "parameter {} {:?} vs checkpoint {} {:?}",
                dst.name,
                dst.value.shape(),
                src.name,
                src.value.shape()
            )));
        }
        dst.value = src.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()).unwrap();
        s.register("b", Tensor::scalar(7.0)).unwrap();
        s
    }

    #[test]
    fn roundtrip_and_layout() {
        let s = sample();
        let bytes = encode_checkpoint(&s);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(bytes[12], 8);
        let back: ParamStore<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.params()[0].value, s.params()[0].value);
        assert_eq!(back.name(back.id("b").unwrap()), "b");
    }

    #[test]
    fn precision_conversion() {
        let bytes = encode_checkpoint(&sample());
        let back: ParamStore<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params()[0].value.data(), &[1.0f32, -2.5, 3.25, 0.0]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f64>(&bad).is_err());
    }

    #[test]
    fn restore_requires_matching_layout() {
        let mut s = sample();
        let mut other = ParamStore::<f64>::new();
        other.register("a.w", Tensor::zeros(&[2, 3])).unwrap();
        other.register("b", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(restore_into(&mut s, &other), Err(Error::Mismatch(_))));
    }
}
