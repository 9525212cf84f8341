//! Binary embedding matrices.
//!
//! Layout (all little-endian): magic `MACE`, `u16` version = 1, `u16`
//! reserved = 0, `u32` n, `u32` d, then `n*d` `f32` values row-major. No
//! trailing bytes. Rows are promoted to `f64` on load; writing casts back, so
//! a parse/write cycle reproduces the file byte for byte.
//!
//! Frame keys live in a sidecar JSONL file, line `i` naming row `i`.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::{jsonl, FrameKey, IngestError, ParseMode};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"MACE";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// `n x d` matrix of frame embeddings with optional row keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    matrix: DMatrix<f64>,
    keys: Vec<FrameKey>,
}

impl EmbeddingSet {
    /// Rows must be finite; `keys` is either empty or one key per row.
    pub fn new(matrix: DMatrix<f64>, keys: Vec<FrameKey>) -> Result<Self, IngestError> {
        if matrix.ncols() == 0 {
            return Err(IngestError::ZeroDimension);
        }
        if !keys.is_empty() && keys.len() != matrix.nrows() {
            return Err(IngestError::KeyCountMismatch {
                keys: keys.len(),
                rows: matrix.nrows(),
            });
        }
        if let Some((i, _)) = matrix.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            // column-major storage
            let n = matrix.nrows();
            return Err(IngestError::NonFiniteValue {
                row: i % n,
                col: i / n,
            });
        }
        Ok(Self { matrix, keys })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, IngestError> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(IngestError::MalformedLine {
                line: bad + 1,
                message: format!("row has {} values, expected {d}", rows[bad].len()),
            });
        }
        let matrix = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(matrix, Vec::new())
    }

    pub fn with_keys(self, keys: Vec<FrameKey>) -> Result<Self, IngestError> {
        Self::new(self.matrix, keys)
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn d(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn keys(&self) -> &[FrameKey] {
        &self.keys
    }

    pub fn has_keys(&self) -> bool {
        !self.keys.is_empty()
    }

    /// Rows at the given indices (repeats allowed), keys carried along.
    pub fn select_rows(&self, idx: &[usize]) -> EmbeddingSet {
        let matrix = self.matrix.select_rows(idx);
        let keys = if self.keys.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| self.keys[i].clone()).collect()
        };
        EmbeddingSet { matrix, keys }
    }
}

/// Decodes an embedding binary (keys are not part of the format).
pub fn parse_embeddings(bytes: &[u8]) -> Result<EmbeddingSet, IngestError> {
    if bytes.len() < 4 || bytes[..4] != EMBEDDING_MAGIC {
        return Err(IngestError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(IngestError::TruncatedHeader { len: bytes.len() });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);

    let version = u16_at(4);
    if version != EMBEDDING_VERSION {
        return Err(IngestError::VersionUnsupported(version));
    }
    let reserved = u16_at(6);
    if reserved != 0 {
        return Err(IngestError::ReservedNonZero(reserved));
    }
    let n = u32_at(8);
    let d = u32_at(12);
    if d == 0 {
        return Err(IngestError::ZeroDimension);
    }
    let expected = (n as usize)
        .checked_mul(d as usize)
        .and_then(|c| c.checked_mul(4))
        .ok_or(IngestError::SizeOverflow { n, d })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(IngestError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IngestError::TrailingBytes {
            expected,
            actual: payload.len(),
        });
    }

    let (n, d) = (n as usize, d as usize);
    let mut values = Vec::with_capacity(n * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(IngestError::NonFiniteValue {
                row: i / d,
                col: i % d,
            });
        }
        values.push(f64::from(v));
    }
    let matrix = DMatrix::from_row_slice(n, d, &values);
    Ok(EmbeddingSet {
        matrix,
        keys: Vec::new(),
    })
}

/// Encodes the matrix as float32; keys are written separately.
pub fn write_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let (n, d) = (set.n(), set.d());
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for i in 0..n {
        for j in 0..d {
            out.extend_from_slice(&(set.matrix[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_embedding_keys(keys: &[FrameKey]) -> Vec<u8> {
    let mut out = Vec::new();
    for k in keys {
        serde_json::to_writer(&mut out, k).expect("frame key serializes");
        out.write_all(b"\n").expect("vec write");
    }
    out
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    parse_embeddings(&bytes)
}

/// Reads a binary plus its optional key sidecar.
pub fn read_embedding_set(
    path: &Path,
    keys_path: Option<&Path>,
    mode: ParseMode,
) -> Result<EmbeddingSet, IngestError> {
    let set = read_embeddings(path)?;
    match keys_path {
        Some(kp) => {
            let file = std::fs::File::open(kp).map_err(|e| IngestError::io(kp, e))?;
            let keys = jsonl::parse_embedding_keys(std::io::BufReader::new(file), mode)?;
            set.with_keys(keys)
        }
        None => Ok(set),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(n: u32, d: u32) -> Vec<u8> {
        let mut h = b"MACE".to_vec();
        h.extend_from_slice(&1u16.to_le_bytes());
        h.extend_from_slice(&0u16.to_le_bytes());
        h.extend_from_slice(&n.to_le_bytes());
        h.extend_from_slice(&d.to_le_bytes());
        h
    }

    #[test]
    fn minimal_file() {
        let mut f = header(2, 3);
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            f.extend_from_slice(&v.to_le_bytes());
        }
        let set = parse_embeddings(&f).unwrap();
        assert_eq!((set.n(), set.d()), (2, 3));
        assert_eq!(set.matrix()[(1, 0)], 4.0);
        assert_eq!(set.matrix()[(0, 2)], 3.0);
        assert_eq!(write_embeddings(&set), f);
    }

    #[test]
    fn short_payload() {
        let mut f = header(2, 3);
        f.extend_from_slice(&[0u8; 20]);
        assert!(matches!(
            parse_embeddings(&f),
            Err(IngestError::TruncatedPayload {
                expected: 24,
                actual: 20
            })
        ));
    }

    #[test]
    fn vit_dimension() {
        let mut f = header(10, 384);
        for i in 0..(10 * 384) {
            f.extend_from_slice(&((i % 97) as f32 / 97.0).to_le_bytes());
        }
        let set = parse_embeddings(&f).unwrap();
        assert_eq!(set.d(), 384);
        assert_eq!(set.n(), 10);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_embeddings(b"MAC"), Err(IngestError::BadMagic { .. })));
        assert!(matches!(parse_embeddings(b"FACE0000000000000000"), Err(IngestError::BadMagic { .. })));
        assert!(matches!(parse_embeddings(b"MACE\x01\x00"), Err(IngestError::TruncatedHeader { len: 6 })));
        let mut v2 = header(0, 1);
        v2[4] = 2;
        assert!(matches!(parse_embeddings(&v2), Err(IngestError::VersionUnsupported(2))));
        let mut res = header(0, 1);
        res[6] = 1;
        assert!(matches!(parse_embeddings(&res), Err(IngestError::ReservedNonZero(1))));
        assert!(matches!(parse_embeddings(&header(3, 0)), Err(IngestError::ZeroDimension)));
        let mut trailing = header(1, 1);
        trailing.extend_from_slice(&[0u8; 5]);
        assert!(matches!(parse_embeddings(&trailing), Err(IngestError::TrailingBytes { .. })));
    }

    #[test]
    fn nan_rejected() {
        let mut f = header(1, 2);
        f.extend_from_slice(&1.0f32.to_le_bytes());
        f.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            parse_embeddings(&f),
            Err(IngestError::NonFiniteValue { row: 0, col: 1 })
        ));
    }

    #[test]
    fn key_count_checked() {
        let set = EmbeddingSet::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let err = set.with_keys(vec![FrameKey::new("v", 0)]).unwrap_err();
        assert!(matches!(err, IngestError::KeyCountMismatch { keys: 1, rows: 2 }));
    }
}
