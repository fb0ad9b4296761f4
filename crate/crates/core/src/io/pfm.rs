//! Greyscale PFM depth maps.
//!
//! Header `Pf\n<width> <height>\n<scale>\n`, then 32-bit floats row by row
//! from the bottom row up. A negative scale means little-endian; this
//! writer always uses `-1.0`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{read_file, write_file};

const FORMAT: &str = "PFM";

/// Encodes a `(1, 1, H, W)` map.
pub fn encode(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("write_pfm", format!("expected one channel, got {s:?}")));
    }
    if map.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NanValue { format: FORMAT });
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    out.reserve(4 * map.len());
    let plane = map.plane(0, 0);
    for row in plane.chunks(s.w).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off `count` whitespace-separated header tokens, each terminated
/// by a single whitespace byte.
pub(crate) fn header_tokens(bytes: &[u8], count: usize, format: &'static str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(Error::Format {
                format,
                detail: "incomplete header".into(),
            });
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format {
            format,
            detail: "header is not ASCII".into(),
        })?;
        tokens.push(tok.to_string());
        pos += 1;
    }
    Ok((tokens, pos))
}

pub(crate) fn parse_dim(tok: &str, format: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Format {
            format,
            detail: format!("invalid dimension `{tok}`"),
        }),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 3 || &bytes[..2] != b"Pf" || !bytes[2].is_ascii_whitespace() {
        return Err(Error::BadMagic { format: FORMAT });
    }
    let (tokens, offset) = header_tokens(&bytes[3..], 3, FORMAT)?;
    let offset = offset + 3;
    let w = parse_dim(&tokens[0], FORMAT)?;
    let h = parse_dim(&tokens[1], FORMAT)?;
    let scale: f64 = tokens[2].parse().map_err(|_| Error::Format {
        format: FORMAT,
        detail: format!("invalid scale `{}`", tokens[2]),
    })?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format {
            format: FORMAT,
            detail: format!("invalid scale `{}`", tokens[2]),
        });
    }
    let little = scale < 0.0;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            format: FORMAT,
            detail: "dimensions overflow".into(),
        })?;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            format: FORMAT,
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            format: FORMAT,
            detail: format!("{} bytes after the payload", payload.len() - expected),
        });
    }
    let mut data = vec![0f32; w * h];
    for (r, src) in payload.chunks_exact(4 * w).enumerate() {
        let row = h - 1 - r;
        for (x, b) in src.chunks_exact(4).enumerate() {
            let b: [u8; 4] = b.try_into().expect("chunk of 4");
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            if v.is_nan() {
                return Err(Error::NanValue { format: FORMAT });
            }
            data[row * w + x] = v;
        }
    }
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode(map)?)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&read_file(path.as_ref())?)
}
