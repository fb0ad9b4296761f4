//! Binary 8-bit PPM (`P6`) frames; channel values map to `[0, 1]` by
//! `/ 255` and back by `round(v · 255)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::pfm::{header_tokens, parse_dim};
use super::{read_file, write_file};

const FORMAT: &str = "PPM";

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `(1, 3, H, W)` image; values are clamped to `[0, 1]`.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_ppm", format!("expected three channels, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let (r, g, b) = (image.plane(0, 0), image.plane(0, 1), image.plane(0, 2));
    for i in 0..s.plane() {
        out.extend_from_slice(&[to_byte(r[i]), to_byte(g[i]), to_byte(b[i])]);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 3 || &bytes[..2] != b"P6" || !bytes[2].is_ascii_whitespace() {
        return Err(Error::BadMagic { format: FORMAT });
    }
    let (tokens, offset) = header_tokens(&bytes[3..], 3, FORMAT)?;
    let offset = offset + 3;
    let w = parse_dim(&tokens[0], FORMAT)?;
    let h = parse_dim(&tokens[1], FORMAT)?;
    if tokens[2] != "255" {
        return Err(Error::Format {
            format: FORMAT,
            detail: format!("maximum value {} is not 255", tokens[2]),
        });
    }
    let payload = &bytes[offset..];
    let expected = 3 * w * h;
    if payload.len() != expected {
        return Err(Error::Truncated {
            format: FORMAT,
            expected,
            found: payload.len(),
        });
    }
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    let plane = w * h;
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode(image)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&read_file(path.as_ref())?)
}
