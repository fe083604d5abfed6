//! Binary parameter codec: a sequence of
//! `[name_len: u32, name: utf-8, ndim: u32, dims: u64 × ndim, data: f64 × numel]`
//! records, all little-endian, until end of input. Values are always
//! stored as f64 regardless of the in-memory precision.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::{ParamStore, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("parameter file truncated at byte {0}")]
    Truncated(usize),
    #[error("parameter name at byte {0} is not valid UTF-8")]
    BadName(usize),
    #[error("tensor at byte {0} has an implausible shape")]
    BadShape(usize),
}

pub fn encode_params<S: Real>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CodecError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params<S: Real>(bytes: &[u8]) -> Result<ParamStore<S>, CodecError> {
    let mut r = Reader { bytes, at: 0 };
    let mut store = ParamStore::new();
    while r.at < bytes.len() {
        let start = r.at;
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CodecError::BadName(start))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(CodecError::BadShape(start));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CodecError::BadShape(start))?;
        let raw = r.take(numel.checked_mul(8).ok_or(CodecError::BadShape(start))?)?;
        let data = raw.chunks_exact(8).map(|c| S::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        let t = Tensor::new(shape, data).map_err(|_| CodecError::BadShape(start))?;
        store.add(name, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25));
        s.add("b.c", Tensor::scalar(f64::MIN_POSITIVE));
        let bytes = encode_params(&s);
        assert_eq!(decode_params::<f64>(&bytes).unwrap(), s);
        for cut in [1, 7, bytes.len() - 1] {
            assert!(matches!(decode_params::<f64>(&bytes[..cut]), Err(CodecError::Truncated(_))));
        }
    }
}
