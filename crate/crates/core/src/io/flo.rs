//! Middlebury `.flo` optical flow.
//!
//! | offset | bytes | content                                      |
//! |--------|-------|----------------------------------------------|
//! | 0      | 4     | `202021.25` as little-endian f32 (`PIEH`)    |
//! | 4      | 4     | width, little-endian i32                     |
//! | 8      | 4     | height, little-endian i32                    |
//! | 12     | 8·W·H | `(dx, dy)` f32 pairs, row-major, top row first |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{read_file, write_file, Reader};

const FORMAT: &str = "flo";
pub const MAGIC: f32 = 202021.25;

/// Encodes a `(1, 2, H, W)` flow field.
pub fn encode(flow: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.n != 1 || s.c != 2 {
        return Err(Error::shape("write_flo", format!("expected two channels, got {s:?}")));
    }
    let dim = |v: usize| {
        i32::try_from(v).map_err(|_| Error::Format {
            format: FORMAT,
            detail: format!("dimension {v} too large"),
        })
    };
    let mut out = Vec::with_capacity(12 + 8 * s.plane());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&dim(s.w)?.to_le_bytes());
    out.extend_from_slice(&dim(s.h)?.to_le_bytes());
    for (u, v) in flow.plane(0, 0).iter().zip(flow.plane(0, 1)) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, FORMAT);
    if r.f32().ok() != Some(MAGIC) {
        return Err(Error::BadMagic { format: FORMAT });
    }
    let (w, h) = (r.i32()?, r.i32()?);
    if w <= 0 || h <= 0 {
        return Err(Error::Format {
            format: FORMAT,
            detail: format!("invalid size {w}x{h}"),
        });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 8 * w * h;
    if r.remaining() != expected {
        return Err(if r.remaining() < expected {
            Error::Truncated {
                format: FORMAT,
                expected: 12 + expected,
                found: bytes.len(),
            }
        } else {
            Error::Format {
                format: FORMAT,
                detail: format!("payload of {} bytes for a {w}x{h} field", r.remaining()),
            }
        });
    }
    let mut t = Tensor::zeros(Shape::new(1, 2, h, w));
    for i in 0..w * h {
        let (u, v) = (r.f32()?, r.f32()?);
        t.data_mut()[i] = u;
        t.data_mut()[w * h + i] = v;
    }
    Ok(t)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode(flow)?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_layout() {
        let bytes = encode(&Tensor::zeros(Shape::new(1, 2, 4, 4))).unwrap();
        assert_eq!(bytes.len(), 12 + 32 * 4);
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(&bytes[4..8], &4i32.to_le_bytes());
        assert!(bytes[12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn components_are_interleaved() {
        let t = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0f32, 2.0, -1.0, -2.0]).unwrap();
        let bytes = encode(&t).unwrap();
        let floats: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(floats, [1.0, -1.0, 2.0, -2.0]);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn validation_errors() {
        let good = encode(&Tensor::zeros(Shape::new(1, 2, 2, 3))).unwrap();
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
        let mut bad = good;
        bad[0] ^= 1;
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(&[]), Err(Error::BadMagic { .. })));
    }
}
