//! IDX containers (the MNIST file format).
//!
//! Header: two zero bytes, an element type code, the number of dimensions,
//! then one big-endian `u32` extent per dimension. Only unsigned bytes
//! (`0x08`) are supported.

use std::io::Read;
use std::path::Path;

use crate::error::DataError;
use crate::{Error, Result, Tensor};

pub const IDX_U8: u8 = 0x08;
const KNOWN_CODES: [u8; 6] = [0x08, 0x09, 0x0B, 0x0C, 0x0D, 0x0E];

/// Raw extents and bytes of a `u8` IDX file.
pub fn parse_idx_raw(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: 4, got: bytes.len() }.into());
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let (code, ndims) = (bytes[2], bytes[3] as usize);
    if bytes[0] != 0 || bytes[1] != 0 || ndims == 0 || !KNOWN_CODES.contains(&code) {
        return Err(DataError::BadMagic(magic).into());
    }
    if code != IDX_U8 {
        return Err(DataError::UnsupportedDType(code).into());
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated { expected: header, got: bytes.len() }.into());
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Overflow(dims.clone()))?;
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, got: bytes.len() }.into());
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected).into());
    }
    Ok((dims, &bytes[header..]))
}

/// Parses an IDX file into an f32 tensor. One-dimensional files are labels
/// and keep their integer values; anything else is image data scaled from
/// `0..=255` to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let (dims, data) = parse_idx_raw(bytes)?;
    let scale = if dims.len() == 1 { 1.0 } else { 1.0 / 255.0 };
    let values: Vec<f32> = data.iter().map(|&b| b as f32 * scale).collect();
    Tensor::from_vec(dims, values)
}

/// Inverse of [`parse_idx`] for tensors whose values it can produce.
pub fn serialize_idx(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.shape();
    let scale = if dims.len() == 1 { 1.0 } else { 255.0 };
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Overflow(dims.to_vec()))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for v in t.to_f64_vec() {
        let b = (v * scale).round();
        if !(0.0..=255.0).contains(&b) {
            return Err(Error::InvalidArgument(format!("value {v} does not fit an IDX byte")));
        }
        out.push(b as u8);
    }
    Ok(out)
}

/// Reads a file, transparently decompressing `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path.display(), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(path: &Path) -> Result<Tensor> {
    parse_idx(&read_maybe_gz(path)?)
}
