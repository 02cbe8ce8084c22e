//! `EMB1` feature store: a little-endian header, `n × d` `f32` features
//! row-major, `n` `u32` labels and a CRC32 of everything before it.
//!
//! ```text
//! "EMB1" | version u16 | n u64 | d u32 | features | labels | crc u32
//! ```

use std::fs;
use std::path::Path;

use crate::binfmt::{open, Writer};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u16 = 1;
/// Bytes before the feature block.
pub const HEADER_LEN: u64 = 4 + 2 + 8 + 4;

/// Exact file size for `n` rows of dimension `d`.
pub fn file_len(n: u64, d: u64) -> Option<u64> {
    let per_row = d.checked_mul(4)?.checked_add(4)?;
    n.checked_mul(per_row)?.checked_add(HEADER_LEN + 4)
}

pub fn encode_emb<T: Scalar>(ds: &EmbeddingDataset<T>) -> Result<Vec<u8>> {
    let d = u32::try_from(ds.dim()).map_err(|_| Error::FormatLimit(format!("dimension {}", ds.dim())))?;
    let mut w = Writer::new(MAGIC, VERSION);
    w.u64(ds.n() as u64);
    w.u32(d);
    w.f32s(ds.features.as_slice());
    for &l in &ds.labels {
        w.u32(u32::try_from(l).map_err(|_| Error::FormatLimit(format!("label {l}")))?);
    }
    Ok(w.finish())
}

/// Parses an `EMB1` image. The identity count is one past the largest label.
pub fn decode_emb<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingDataset<T>> {
    let mut r = open(bytes, MAGIC, VERSION)?;
    let n = r.u64()?;
    let d = r.u32()?;
    let total = file_len(n, d as u64).ok_or(Error::Overflow)?;
    r.verify_total(total)?;
    let (n, d) = (n as usize, d as usize);
    let features = Matrix::from_vec(n, d, r.f32s(n * d)?)?;
    let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
    let n_ids = labels.iter().max().map_or(0, |&m| m + 1);
    EmbeddingDataset::new(features, labels, n_ids)
}

pub fn write_emb<T: Scalar>(ds: &EmbeddingDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_emb(ds)?)?;
    Ok(())
}

pub fn read_emb<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingDataset<T>> {
    decode_emb(&fs::read(path)?)
}
