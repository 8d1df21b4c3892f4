//! Frame layout shared by every transport.
//!
//! ```text
//! u32 LE payload_len | u8 msg_type | u32 LE sender | u64 LE step_tag | u32 LE tensor_id | payload
//! ```
//!
//! Dense payloads are the raw little-endian elements of a tensor (f32, or
//! f64 for double-precision runs; the receiver knows the element count and
//! tells the two apart by length). Sparse payloads are
//!
//! ```text
//! u32 LE nnz | nnz × (u32 LE index, f32 LE value) | u32 LE flag | flag ? nnz × u32 LE count : nothing
//! ```
//!
//! where indices are strictly increasing and `count` is the number of
//! workers that contributed to the value (all ones when the flag is 0).

use crate::error::CommError;
use crate::{DType, Tensor};

pub const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    GradPush = 0,
    ParamBcast = 1,
    ArChunk = 2,
    Barrier = 3,
    Shutdown = 4,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<MsgType, CommError> {
        Ok(match v {
            0 => MsgType::GradPush,
            1 => MsgType::ParamBcast,
            2 => MsgType::ArChunk,
            3 => MsgType::Barrier,
            4 => MsgType::Shutdown,
            other => return Err(CommError::Frame(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub sender: u32,
    pub step: u64,
    pub tensor_id: u32,
    pub payload: Vec<u8>,
}

/// Decoded fixed-size header: `(payload_len, msg_type, sender, step, tensor_id)`.
pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(usize, MsgType, u32, u64, u32), CommError> {
    let len = u32::from_le_bytes(h[0..4].try_into().unwrap()) as usize;
    let ty = MsgType::from_u8(h[4])?;
    let sender = u32::from_le_bytes(h[5..9].try_into().unwrap());
    let step = u64::from_le_bytes(h[9..17].try_into().unwrap());
    let tid = u32::from_le_bytes(h[17..21].try_into().unwrap());
    Ok((len, ty, sender, step, tid))
}

impl Frame {
    pub fn new(msg_type: MsgType, sender: usize, step: u64, tensor_id: u32, payload: Vec<u8>) -> Frame {
        Frame { msg_type, sender: sender as u32, step, tensor_id, payload }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.tensor_id.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, CommError> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| CommError::Frame(format!("{} bytes is shorter than a header", bytes.len())))?;
        let (len, msg_type, sender, step, tensor_id) = parse_header(header)?;
        if bytes.len() - HEADER_LEN != len {
            return Err(CommError::Frame(format!(
                "header announces {len} payload bytes but {} follow",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Frame { msg_type, sender, step, tensor_id, payload: bytes[HEADER_LEN..].to_vec() })
    }
}

pub fn encode_dense(t: &Tensor) -> Vec<u8> {
    t.to_le_bytes()
}

/// Decodes a dense payload of `shape` and returns it in `dtype`.
pub fn decode_dense(bytes: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor, CommError> {
    let n: usize = shape.iter().product();
    let wire = match (bytes.len(), n) {
        (0, 0) => dtype,
        (len, n) if n > 0 && len == 4 * n => DType::F32,
        (len, n) if n > 0 && len == 8 * n => DType::F64,
        (len, _) => {
            return Err(CommError::Frame(format!("{len} payload bytes do not hold {n} dense elements")));
        }
    };
    let t = Tensor::from_le_bytes(wire, shape.to_vec(), bytes).map_err(|e| CommError::Frame(e.to_string()))?;
    Ok(if wire == dtype { t } else { t.cast(dtype) })
}

/// Sparse vector on the wire. `counts` is `None` for raw (single worker)
/// contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
    pub counts: Option<Vec<u32>>,
}

impl SparsePayload {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn count(&self, i: usize) -> u32 {
        self.counts.as_ref().map_or(1, |c| c[i])
    }

    pub fn encode(&self) -> Vec<u8> {
        let nnz = self.nnz();
        let extra = if self.counts.is_some() { 4 * nnz } else { 0 };
        let mut out = Vec::with_capacity(8 + 8 * nnz + extra);
        out.extend_from_slice(&(nnz as u32).to_le_bytes());
        for (i, v) in self.indices.iter().zip(&self.values) {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.counts {
            Some(c) => {
                out.extend_from_slice(&1u32.to_le_bytes());
                c.iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
            }
            None => out.extend_from_slice(&0u32.to_le_bytes()),
        }
        out
    }

    /// Decodes and validates against a dense length of `n`.
    pub fn decode(bytes: &[u8], n: usize) -> Result<SparsePayload, CommError> {
        let bad = |m: String| CommError::Frame(format!("sparse payload: {m}"));
        let word = |at: usize| -> Result<[u8; 4], CommError> {
            bytes
                .get(at..at + 4)
                .map(|w| w.try_into().unwrap())
                .ok_or_else(|| bad(format!("truncated at byte {at}")))
        };
        let nnz = u32::from_le_bytes(word(0)?) as usize;
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for k in 0..nnz {
            let at = 4 + 8 * k;
            let idx = u32::from_le_bytes(word(at)?);
            if idx as usize >= n || indices.last().is_some_and(|&p| p >= idx) {
                return Err(bad(format!("index {idx} out of order or outside [0, {n})")));
            }
            indices.push(idx);
            values.push(f32::from_le_bytes(word(at + 4)?));
        }
        let flag_at = 4 + 8 * nnz;
        let counts = match u32::from_le_bytes(word(flag_at)?) {
            0 => None,
            1 => Some(
                (0..nnz)
                    .map(|k| word(flag_at + 4 + 4 * k).map(u32::from_le_bytes))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            f => return Err(bad(format!("count flag {f}"))),
        };
        let end = flag_at + 4 + counts.as_ref().map_or(0, |c| 4 * c.len());
        if bytes.len() != end {
            return Err(bad(format!("{} trailing bytes", bytes.len().saturating_sub(end))));
        }
        Ok(SparsePayload { indices, values, counts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_frozen() {
        let f = Frame::new(MsgType::ArChunk, 3, 0x0102_0304_0506_0708, 9, vec![0xAA, 0xBB]);
        let b = f.encode();
        assert_eq!(
            b,
            [
                2, 0, 0, 0, // payload_len
                2, // ArChunk
                3, 0, 0, 0, // sender
                8, 7, 6, 5, 4, 3, 2, 1, // step
                9, 0, 0, 0, // tensor id
                0xAA, 0xBB
            ]
        );
        assert_eq!(Frame::decode(&b).unwrap(), f);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut b = Frame::new(MsgType::Barrier, 0, 0, 0, vec![1, 2, 3]).encode();
        b.pop();
        assert!(matches!(Frame::decode(&b), Err(CommError::Frame(_))));
        b[4] = 9;
        assert!(Frame::decode(&b).is_err());
    }

    #[test]
    fn dense_roundtrip_in_both_widths() {
        let t = Tensor::from_vec([3], vec![1.5f32, -2.0, 0.25]).unwrap();
        assert_eq!(decode_dense(&encode_dense(&t), DType::F32, &[3]).unwrap(), t);
        let d = t.cast(DType::F64);
        assert_eq!(decode_dense(&encode_dense(&d), DType::F64, &[3]).unwrap(), d);
        assert!(decode_dense(&[0; 5], DType::F32, &[3]).is_err());
    }

    #[test]
    fn sparse_roundtrip() {
        let s = SparsePayload { indices: vec![1, 4], values: vec![0.5, -1.0], counts: Some(vec![2, 1]) };
        let b = s.encode();
        assert_eq!(b.len(), 4 + 16 + 4 + 8);
        assert_eq!(SparsePayload::decode(&b, 5).unwrap(), s);
        assert!(SparsePayload::decode(&b, 4).is_err());
        let raw = SparsePayload { counts: None, ..s };
        assert_eq!(SparsePayload::decode(&raw.encode(), 5).unwrap(), raw);
    }
}
