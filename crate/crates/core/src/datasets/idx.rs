//! IDX container: `00 00 <type> <ndims>`, big-endian u32 dimension sizes,
//! then the raw payload. Only the unsigned-byte element type is supported.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::DataError;

const UBYTE: u8 = 0x08;

/// Decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per item (product of the trailing dimensions).
    pub fn item_size(&self) -> usize {
        self.dims[1..].iter().product()
    }
}

fn err(offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Idx { offset, reason: reason.into() }
}

/// Parses an IDX byte buffer, transparently gunzipping it first if needed.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut raw).map_err(|e| err(0, format!("bad gzip stream: {e}")))?;
        return parse_idx(&raw);
    }
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != UBYTE {
        return Err(err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let at = 4 + 4 * i;
        let word = bytes.get(at..at + 4).ok_or_else(|| err(bytes.len(), format!("truncated size of dimension {i}")))?;
        dims.push(u32::from_be_bytes(word.try_into().expect("4-byte slice")) as usize);
    }
    let start = 4 + 4 * ndims;
    let want = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(|| err(4, "size overflow"))?;
    let have = bytes.len() - start;
    if have < want {
        return Err(err(bytes.len(), format!("truncated payload: {have} of {want} bytes")));
    }
    if have > want {
        return Err(err(start + want, format!("{} trailing bytes", have - want)));
    }
    Ok(IdxArray { dims, data: bytes[start..].to_vec() })
}

pub fn read_idx(path: &Path) -> Result<IdxArray, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_idx(&bytes).map_err(|e| match e {
        DataError::Idx { offset, reason } => DataError::Idx { offset, reason: format!("{}: {reason}", path.display()) },
        other => other,
    })
}

/// Serializes to uncompressed IDX.
pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, array.dims.len() as u8];
    for d in &array.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<(), DataError> {
    std::fs::write(path, encode_idx(array)).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}
