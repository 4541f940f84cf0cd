//! Binary checkpoint format.
//!
//! ```text
//! "PVRF"            4 bytes magic
//! version           u32 LE (currently 1)
//! repeated until EOF:
//!   path_len        u32 LE
//!   path            path_len bytes, UTF-8
//!   rank            u32 LE
//!   dims            rank × u32 LE
//!   values          prod(dims) × f64 LE
//! ```

use std::path::Path;

use super::array::Tensor;
use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVRF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Appends one `(path, tensor)` record.
pub(crate) fn put_record(buf: &mut Vec<u8>, path: &str, t: &Tensor) {
    put_u32(buf, path.len() as u32);
    buf.extend_from_slice(path.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian reader over a byte slice that reports truncation as a
/// format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: wanted {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let path = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for `{path}`")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.filter(|n| n.saturating_mul(8) <= self.bytes.len() - self.pos).ok_or_else(|| {
            Error::Format(format!("truncated: tensor `{path}` of shape {dims:?} exceeds file"))
        })?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok((path, Tensor::new(dims, data)?))
    }
}

pub fn encode_checkpoint(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    for (path, t) in store.iter() {
        put_record(&mut buf, path, t);
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| Error::Format("missing checkpoint magic".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParameterStore::new();
    while !r.at_end() {
        let (path, t) = r.record()?;
        store.insert(&path, t).map_err(|_| Error::Format(format!("duplicate path `{path}` in checkpoint")))?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("b.bias", Tensor::vector(vec![0.5, -0.25])).unwrap();
        s.insert("a.w", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., f64::MIN_POSITIVE]).unwrap()).unwrap();
        s.insert("s", Tensor::scalar(-7.0)).unwrap();
        s
    }

    #[test]
    fn layout_is_documented_little_endian() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let bytes = encode_checkpoint(&s);
        let mut expect = b"PVRF".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'x');
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let bytes = encode_checkpoint(&sample_store());
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.value("a.w").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut bytes = encode_checkpoint(&sample_store());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("version")));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(b"PV"), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(b"XXXX\x01\0\0\0"), Err(Error::Format(_))));
    }
}
