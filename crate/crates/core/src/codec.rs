//! Little-endian byte helpers shared by the checkpoint and adapter formats.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Real;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Checksum of a tensor's 32-bit little-endian image, independent of the
/// in-memory precision.
pub(crate) fn tensor_checksum<T: Real>(data: &[T]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    push_f32s(&mut bytes, data);
    sha256_hex(&bytes)
}

pub(crate) fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32s<T: Real>(out: &mut Vec<u8>, data: &[T]) {
    for &v in data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Cursor over an in-memory file that reports truncation with the offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut r = ByteReader::new(&[1, 0, 0, 0, 9]);
        assert_eq!(r.u32("a").unwrap(), 1);
        match r.u32("b") {
            Err(Error::Corruption { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn f32_round_trip() {
        let mut out = Vec::new();
        push_f32s(&mut out, &[1.5f32, -0.25]);
        let v: Vec<f32> = ByteReader::new(&out).f32s(2, "x").unwrap();
        assert_eq!(v, vec![1.5, -0.25]);
    }
}
