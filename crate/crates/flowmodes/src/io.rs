//! Binary flow-file format (MMFF).
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   magic   "MMFF" (4 bytes)
//! offset 4   version u16 = 1
//! offset 6   reserved u16 = 0
//! offset 8   frames  u32
//! offset 12  height  u32
//! offset 16  width   u32
//! offset 20  payload F*H*W*2 f32, [frame][row][col][dx, dy] order
//! offset 20+P  crc32 of the payload bytes (u32)
//! ```
//!
//! Decoding is total over arbitrary byte strings: every failure mode is a
//! typed error carrying the byte offset where it was detected, and no
//! allocation ever exceeds the input length.

use crate::flow::FlowField;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MMFF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum FlowIoError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {version} at byte 4")]
    UnsupportedVersion { version: u16 },
    #[error("reserved field must be 0, found {found} at byte 6")]
    ReservedNonzero { found: u16 },
    #[error("truncated: need {needed} bytes at offset {offset}, only {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid shape {frames}x{height}x{width} at byte 8: dimensions must be nonzero")]
    ZeroDimension { frames: u32, height: u32, width: u32 },
    #[error("shape overflow {frames}x{height}x{width} at byte 8: payload exceeds input size")]
    ShapeOverflow { frames: u32, height: u32, width: u32 },
    #[error("{extra} trailing bytes after checksum at offset {offset}")]
    TrailingData { offset: usize, extra: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("non-finite payload value at byte offset {offset}")]
    NonFinitePayload { offset: usize },
    #[error("field of shape {frames}x{height}x{width} does not fit the u32 header")]
    ShapeTooLarge {
        frames: usize,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialize a field to MMFF bytes. Values are narrowed to `f32`.
pub fn encode_flow(field: &FlowField) -> Result<Vec<u8>, FlowIoError> {
    let (f, h, w) = field.shape();
    if f > u32::MAX as usize || h > u32::MAX as usize || w > u32::MAX as usize {
        return Err(FlowIoError::ShapeTooLarge {
            frames: f,
            height: h,
            width: w,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + field.len() * 4 + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in field.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parse MMFF bytes into a field.
pub fn decode_flow(bytes: &[u8]) -> Result<FlowField, FlowIoError> {
    let need = |offset: usize, needed: usize| -> Result<(), FlowIoError> {
        if bytes.len() < offset + needed {
            Err(FlowIoError::Truncated {
                offset,
                needed,
                available: bytes.len().saturating_sub(offset),
            })
        } else {
            Ok(())
        }
    };

    need(0, 4)?;
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != MAGIC {
        return Err(FlowIoError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    need(4, 2)?;
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(FlowIoError::UnsupportedVersion { version });
    }
    need(6, 2)?;
    let reserved = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
    if reserved != 0 {
        return Err(FlowIoError::ReservedNonzero { found: reserved });
    }
    need(8, 12)?;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if f == 0 || h == 0 || w == 0 {
        return Err(FlowIoError::ZeroDimension {
            frames: f,
            height: h,
            width: w,
        });
    }

    // Payload size in bytes, checked so hostile headers cannot trigger huge
    // allocations: the payload must actually be present in the input.
    let payload_len = (f as u64)
        .checked_mul(h as u64)
        .and_then(|v| v.checked_mul(w as u64))
        .and_then(|v| v.checked_mul(8))
        .filter(|&v| v <= (bytes.len() as u64).saturating_sub(HEADER_LEN as u64))
        .ok_or(FlowIoError::ShapeOverflow {
            frames: f,
            height: h,
            width: w,
        })? as usize;

    need(HEADER_LEN, payload_len + 4)?;
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let crc_offset = HEADER_LEN + payload_len;
    let stored = u32::from_le_bytes(bytes[crc_offset..crc_offset + 4].try_into().unwrap());
    if bytes.len() > crc_offset + 4 {
        return Err(FlowIoError::TrailingData {
            offset: crc_offset + 4,
            extra: bytes.len() - crc_offset - 4,
        });
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FlowIoError::ChecksumMismatch { stored, computed });
    }

    let mut field = FlowField::zeros(f as usize, h as usize, w as usize)
        .expect("dimensions checked nonzero");
    let dst = field.as_slice_mut();
    for (idx, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FlowIoError::NonFinitePayload {
                offset: HEADER_LEN + idx * 4,
            });
        }
        dst[idx] = v as f64;
    }
    Ok(field)
}

pub fn write_flow(field: &FlowField, path: impl AsRef<Path>) -> Result<(), FlowIoError> {
    let bytes = encode_flow(field)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField, FlowIoError> {
    let bytes = std::fs::read(path)?;
    decode_flow(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_round_trip() {
        let field = FlowField::zeros(2, 4, 4).unwrap();
        let bytes = encode_flow(&field).unwrap();
        let back = decode_flow(&bytes).unwrap();
        assert_eq!(field, back);
        // encode(decode(bytes)) reproduces the input bit for bit
        assert_eq!(encode_flow(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_rejected() {
        let field = FlowField::zeros(1, 2, 2).unwrap();
        let mut bytes = encode_flow(&field).unwrap();
        bytes[0] = b'X';
        match decode_flow(&bytes) {
            Err(FlowIoError::BadMagic { found, .. }) => assert_eq!(&found, b"XMFF"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        // Construct the file by hand per the format definition, then corrupt it.
        let mut field = FlowField::zeros(1, 2, 2).unwrap();
        field.set(0, 0, 1, [1.5, 0.0]);
        let mut bytes = encode_flow(&field).unwrap();
        let payload_start = 20;
        bytes[payload_start + 2 * 8] ^= 0x40; // the entry holding 1.5
        assert!(matches!(
            decode_flow(&bytes),
            Err(FlowIoError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let field = FlowField::zeros(1, 2, 2).unwrap();
        let bytes = encode_flow(&field).unwrap();
        match decode_flow(&bytes[..bytes.len() - 3]) {
            Err(FlowIoError::Truncated { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected Truncated, got {other:?}"),
        }
        match decode_flow(&bytes[..10]) {
            Err(FlowIoError::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, 8);
                assert_eq!(needed, 12);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn hostile_shape_rejected_without_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MMFF");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            decode_flow(&bytes),
            Err(FlowIoError::ShapeOverflow { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let field = FlowField::zeros(1, 1, 1).unwrap();
        let mut bytes = encode_flow(&field).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_flow(&bytes),
            Err(FlowIoError::TrailingData { extra: 1, .. })
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let field = FlowField::zeros(1, 1, 1).unwrap();
        let mut bytes = encode_flow(&field).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        let crc = crc32fast::hash(&bytes[20..28]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_flow(&bytes),
            Err(FlowIoError::NonFinitePayload { offset: 20 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("motion.mmff");
        let mut field = FlowField::zeros(3, 5, 7).unwrap();
        for (idx, v) in field.as_slice_mut().iter_mut().enumerate() {
            *v = (idx as f32 * 0.25) as f64; // f32-representable
        }
        write_flow(&field, &path).unwrap();
        let back = read_flow(&path).unwrap();
        assert_eq!(field, back);
    }
}
