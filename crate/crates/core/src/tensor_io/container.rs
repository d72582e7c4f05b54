//! Shared framing for the binary containers: 4-byte magic, little-endian u64
//! header length, UTF-8 JSON header, raw little-endian f32 payload.

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

const PREFIX_LEN: usize = 4 + 8;

pub(crate) fn assemble<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[f32]) -> Vec<u8> {
    // Struct fields are declared in sorted order, so this is the canonical form.
    let header = serde_json::to_vec(header).expect("header serialization is infallible");
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a container into its parsed header and raw payload bytes.
pub(crate) fn split<'a, H: DeserializeOwned>(
    magic: &[u8; 4],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::HeaderParse(
            "file ends inside the header length field".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[4..PREFIX_LEN].try_into().unwrap());
    let available = (bytes.len() - PREFIX_LEN) as u64;
    if header_len > available {
        return Err(Error::HeaderParse(format!(
            "header length {header_len} exceeds remaining {available} bytes"
        )));
    }
    let header_end = PREFIX_LEN + header_len as usize;
    let header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

/// Decodes a payload of exactly `count` finite f32 values.
pub(crate) fn decode_f32s(payload: &[u8], count: usize) -> Result<Vec<f32>> {
    let expected = count as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            actual: payload.len() as u64,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::PayloadInvalid(format!(
            "non-finite value {} at element {pos}",
            values[pos]
        )));
    }
    Ok(values)
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
