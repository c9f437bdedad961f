//! Embedding matrices on disk and in memory.
//!
//! File layout (little-endian, no padding):
//!
//! ```text
//! magic    8 bytes   "OIDEMB01"
//! version  u32       1
//! dim      u32
//! count    u64
//! ids      count x (u16 byte length, UTF-8 bytes)
//! payload  count x dim x f32
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"OIDEMB01";
pub const FORMAT_VERSION: u32 = 1;

/// Rows whose norm is already this close to 1 are stored as given, which
/// keeps normalization idempotent at the bit level.
pub const UNIT_NORM_SLACK: f64 = 1e-6;

/// Number of interleaved partial sums in [`cosine`].
pub const DOT_LANES: usize = 8;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("id `{0}...` longer than 65535 bytes")]
    IdTooLong(String),
    #[error("id table entry {0} is not valid UTF-8")]
    BadId(usize),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("row `{0}` has zero norm")]
    ZeroNorm(String),
    #[error("row `{0}` has non-finite values")]
    NonFinite(String),
}

/// Dense row-major matrix of unit-norm embeddings keyed by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    /// Builds a set, normalizing every row.
    pub fn new(dim: usize, ids: Vec<String>, mut matrix: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if ids.len() * dim != matrix.len() {
            return Err(EmbedError::DimMismatch(format!(
                "{} ids x dim {} != {} values",
                ids.len(),
                dim,
                matrix.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(EmbedError::DuplicateId(id.clone()));
            }
        }
        for (row, id) in matrix.chunks_exact_mut(dim).zip(&ids) {
            normalize_row(row).map_err(|e| match e {
                RowFault::Zero => EmbedError::ZeroNorm(id.clone()),
                RowFault::NonFinite => EmbedError::NonFinite(id.clone()),
            })?;
        }
        Ok(Self {
            dim,
            ids,
            matrix,
            index,
        })
    }

    pub fn empty(dim: usize) -> Result<Self, EmbedError> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row_at(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row_at(i))
    }
}

enum RowFault {
    Zero,
    NonFinite,
}

fn normalize_row(row: &mut [f32]) -> Result<(), RowFault> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(RowFault::NonFinite);
    }
    let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(RowFault::Zero);
    }
    if (norm - 1.0).abs() > UNIT_NORM_SLACK {
        for v in row.iter_mut() {
            *v = ((*v as f64) / norm) as f32;
        }
    }
    Ok(())
}

/// Inner product of two unit rows.
///
/// Products are accumulated in f32 across [`DOT_LANES`] interleaved partial
/// sums (element `k` goes to lane `k % 8`), then the lanes are combined as
/// `((l0+l4)+(l2+l6)) + ((l1+l5)+(l3+l7))`. Every score in the crate goes
/// through this summation order, so blocked and naive searches agree bit
/// for bit.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; DOT_LANES];
    let mut ca = a.chunks_exact(DOT_LANES);
    let mut cb = b.chunks_exact(DOT_LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..DOT_LANES {
            lanes[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[k] += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6])) + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
}

pub fn encode_embeddings(ids: &[String], matrix: &[f32], dim: usize) -> Result<Vec<u8>, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::ZeroDim);
    }
    if ids.len() * dim != matrix.len() {
        return Err(EmbedError::DimMismatch(format!(
            "{} ids x dim {} != {} values",
            ids.len(),
            dim,
            matrix.len()
        )));
    }
    let id_bytes: usize = ids.iter().map(|s| 2 + s.len()).sum();
    let mut out = Vec::with_capacity(24 + id_bytes + matrix.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        let len = u16::try_from(id.len())
            .map_err(|_| EmbedError::IdTooLong(id.chars().take(32).collect()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in matrix {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet, EmbedError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(EmbedError::BadMagic);
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(EmbedError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(EmbedError::ZeroDim);
    }
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    // Each id costs at least 2 bytes; reject absurd counts before allocating.
    if count.saturating_mul(2) > (bytes.len() - cur.pos) as u64 {
        return Err(EmbedError::Truncated {
            expected: cur.pos as u64 + count.saturating_mul(2 + 4 * dim as u64),
            actual: bytes.len() as u64,
        });
    }
    let count = count as usize;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let raw = cur.take(len)?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|_| EmbedError::BadId(i))?);
    }
    let payload_len = count as u64 * dim as u64 * 4;
    let expected = cur.pos as u64 + payload_len;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(EmbedError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(EmbedError::TrailingBytes(actual - expected));
    }
    let matrix = bytes[cur.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(dim, ids, matrix)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(EmbedError::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn write_embeddings(
    ids: &[String],
    matrix: &[f32],
    dim: usize,
    path: impl AsRef<Path>,
) -> Result<(), EmbedError> {
    let bytes = encode_embeddings(ids, matrix, dim)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<(), EmbedError> {
    write_embeddings(set.ids(), set.matrix(), set.dim(), path)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet, EmbedError> {
    decode_embeddings(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    #[test]
    fn single_row_layout() {
        let bytes = encode_embeddings(&ids(1), &[1.0, 0.0, 0.0, 0.0], 4).unwrap();
        // header 24 + id table (2 + 4) + payload 16
        assert_eq!(bytes.len(), 24 + 6 + 16);
        assert_eq!(&bytes[..8], b"OIDEMB01");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &4u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..26], &4u16.to_le_bytes());
        assert_eq!(&bytes[26..30], b"img0");
        assert_eq!(&bytes[30..34], &1.0f32.to_le_bytes());
    }

    #[test]
    fn normalizes_on_read() {
        let bytes = encode_embeddings(&ids(1), &[3.0, 4.0, 0.0, 0.0], 4).unwrap();
        let set = decode_embeddings(&bytes).unwrap();
        assert_eq!(set.row("img0").unwrap(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn empty_set() {
        let bytes = encode_embeddings(&[], &[], 512).unwrap();
        assert_eq!(bytes.len(), 24);
        let set = decode_embeddings(&bytes).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.dim(), 512);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_embeddings(&ids(1), &[1.0, 0.0], 2).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(EmbedError::BadMagic)));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_embeddings(&ids(1), &[1.0, 0.0], 2).unwrap();
        bytes[8] = 2;
        assert!(matches!(decode_embeddings(&bytes), Err(EmbedError::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_by_one_byte() {
        let bytes = encode_embeddings(&ids(2), &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let full = bytes.len() as u64;
        let err = decode_embeddings(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            EmbedError::Truncated { expected, actual } => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 1);
            }
            other => panic!("{other}"),
        }
        assert!(err_string(&bytes[..bytes.len() - 1]).contains("truncated"));
    }

    fn err_string(b: &[u8]) -> String {
        decode_embeddings(b).unwrap_err().to_string()
    }

    #[test]
    fn zero_norm_rejected() {
        let bytes = encode_embeddings(&ids(1), &[0.0, 0.0], 2).unwrap();
        assert!(matches!(decode_embeddings(&bytes), Err(EmbedError::ZeroNorm(_))));
    }

    #[test]
    fn write_errors() {
        assert!(matches!(
            encode_embeddings(&ids(2), &[1.0, 0.0, 1.0], 2),
            Err(EmbedError::DimMismatch(_))
        ));
        let long = vec!["x".repeat(65536)];
        assert!(matches!(
            encode_embeddings(&long, &[1.0], 1),
            Err(EmbedError::IdTooLong(_))
        ));
        assert!(encode_embeddings(&["x".repeat(65535)], &[1.0], 1).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            EmbeddingSet::new(1, dup, vec![1.0, 1.0]),
            Err(EmbedError::DuplicateId(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = [0.6f32, 0.8];
        assert_eq!(cosine(&a, &[1.0, 0.0]).unwrap(), 0.6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
        assert!(cosine(&a, &[1.0]).is_err());
    }

    #[test]
    fn cosine_lane_order_matches_definition() {
        let a: Vec<f32> = (0..21).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..21).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut lanes = [0.0f32; 8];
        for k in 0..21 {
            lanes[k % 8] += a[k] * b[k];
        }
        let expect = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
            + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
        assert_eq!(cosine(&a, &b).unwrap().to_bits(), expect.to_bits());
    }
}
