//! Binary PPM (P6) image I/O.
//!
//! Images are `[1, 3, H, W]` tensors with values in `[0, 1]`; bytes are
//! 8-bit with round-to-nearest quantization, so write-read round trips are
//! exact at the byte level.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode an RGB image tensor as a P6 byte stream.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::Dimension(format!(
            "PPM wants a [1, 3, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = image.at(0, ch, i, j).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decode a P6 byte stream into a `[1, 3, H, W]` tensor with values in
/// `[0, 1]` (byte / 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Parse(format!(
            "not a P6 file (magic {:?})",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = parse_usize(next_token(bytes, &mut pos)?)?;
    let h = parse_usize(next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Parse(format!("degenerate image {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Parse(format!(
            "truncated pixel data: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut t = Tensor::zeros([1, 3, h, w]);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                *t.at_mut(0, ch, i, j) = bytes[pos] as f64 / 255.0;
                pos += 1;
            }
        }
    }
    Ok(t)
}

/// Advance past whitespace and `#` comments, returning the next token.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("unexpected end of PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Parse(format!(
                "bad header number {:?}",
                String::from_utf8_lossy(token)
            ))
        })
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_exact() {
        let img = Tensor::from_fn([1, 3, 4, 5], |_, c, i, j| {
            ((c * 31 + i * 7 + j * 3) % 256) as f64 / 255.0
        });
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        let again = encode_ppm(&back).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.shape(), [1, 3, 4, 5]);
    }

    #[test]
    fn quantization_rounds_to_nearest() {
        let img = Tensor::filled([1, 3, 1, 1], 0.5);
        let bytes = encode_ppm(&img).unwrap();
        // 0.5 * 255 = 127.5 rounds to 128.
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 128, 128]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), [1, 3, 1, 2]);
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
    }

    #[test]
    fn bad_magic_and_truncation_are_parse_errors() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(Error::Parse(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Parse(_))));
    }

    #[test]
    fn out_of_range_values_clamp() {
        let mut img = Tensor::zeros([1, 3, 1, 1]);
        *img.at_mut(0, 0, 0, 0) = 1.7;
        *img.at_mut(0, 1, 0, 0) = -0.3;
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 0]);
    }
}
