//! Little-endian building blocks shared by the binary containers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s<T: Scalar>(&mut self, xs: &[T]) {
        for &x in xs {
            self.buf.extend_from_slice(&(x.to_f64_exact() as f32).to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Checks magic and version and positions a reader after them.
pub(crate) fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], supported: u16) -> Result<Reader<'a>> {
    if bytes.len() < 4 {
        return Err(truncated(6, bytes.len()));
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic(bytes[..4].try_into().expect("4 bytes")));
    }
    if bytes.len() < 6 {
        return Err(truncated(6, bytes.len()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != supported {
        return Err(Error::VersionUnsupported(version));
    }
    Ok(Reader { bytes, pos: 6 })
}

fn truncated(expected: u64, found: usize) -> Error {
    Error::Truncated {
        expected,
        found: found as u64,
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Fails with `Truncated` unless `n` more bytes plus the CRC trailer remain.
    fn need(&self, n: u64) -> Result<()> {
        let expected = (self.pos as u64).saturating_add(n).saturating_add(4);
        if (self.bytes.len() as u64) < expected {
            return Err(truncated(expected, self.bytes.len()));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n as u64)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::Overflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }

    /// Checks that the whole container, CRC trailer included, is exactly
    /// `total` bytes long and that the trailer matches. Call once the header
    /// fields that determine the length have been read.
    pub fn verify_total(&self, total: u64) -> Result<()> {
        let len = self.bytes.len() as u64;
        if len < total {
            return Err(truncated(total, self.bytes.len()));
        }
        if len > total {
            return Err(Error::TrailingBytes { extra: len - total });
        }
        let body = self.bytes.len() - 4;
        let stored = u32::from_le_bytes(self.bytes[body..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&self.bytes[..body]);
        if stored != computed {
            return Err(Error::BadCrc { stored, computed });
        }
        Ok(())
    }
}
