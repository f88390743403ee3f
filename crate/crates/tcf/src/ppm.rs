//! Binary PPM (P6, maxval 255) reader/writer.
//!
//! The parser follows the netpbm header rules: after the magic, tokens are
//! separated by whitespace, `#` starts a comment running to end of line, and
//! exactly one whitespace byte separates the maxval from the raw RGB
//! payload. The writer emits the canonical `P6\n{w} {h}\n255\n` header, so
//! saving a loaded canonical file reproduces it byte for byte.

use std::path::Path;

use crate::error::{Result, TcfError};
use crate::tensor::Tensor;

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes)
}

/// Decodes P6 bytes into a 3×H×W tensor with values in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut p = Parser { bytes, pos: 0 };
    if p.bytes.len() < 2 || &p.bytes[..2] != b"P6" {
        return Err(TcfError::Ppm("missing P6 magic".into()));
    }
    p.pos = 2;
    let w = p.uint()?;
    let h = p.uint()?;
    let maxval = p.uint()?;
    if maxval != 255 {
        return Err(TcfError::Ppm(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(TcfError::Ppm(format!("degenerate size {w}×{h}")));
    }
    // single whitespace byte, then raw triplets
    match p.bytes.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => p.pos += 1,
        _ => return Err(TcfError::Ppm("maxval not followed by whitespace".into())),
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| TcfError::Ppm(format!("size {w}×{h} overflows")))?;
    let payload = &p.bytes[p.pos..];
    if payload.len() < need {
        return Err(TcfError::Ppm(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = payload[(y * w + x) * 3 + ch];
                data[ch * h * w + y * w + x] = f32::from(v) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encodes a 3×H×W tensor with values in [0, 1] as canonical P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(TcfError::Ppm(format!(
            "expected 3×H×W image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Ok(encode_rgb(
        &(0..h * w * 3)
            .map(|i| {
                let (px, ch) = (i / 3, i % 3);
                let v = image.data()[ch * h * w + px];
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect::<Vec<u8>>(),
        w,
        h,
    ))
}

/// Canonical P6 encoding of interleaved RGB bytes.
pub fn encode_rgb(rgb: &[u8], w: usize, h: usize) -> Vec<u8> {
    assert_eq!(rgb.len(), w * h * 3, "rgb payload size");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_space(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(TcfError::Ppm("header ended early".into())),
            }
        }
    }

    fn uint(&mut self) -> Result<usize> {
        self.skip_space()?;
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(TcfError::Ppm(format!(
                "expected integer at byte {start}"
            )));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TcfError::Ppm("integer out of range".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn red_and_blue_pixels() {
        let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff";
        let t = decode_ppm(bytes).unwrap();
        // channel planes: R then G then B, each 1×2
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn comments_and_whitespace_in_header() {
        let bytes = b"P6 # a comment\n# another\n 2\t1 # size\n255\n\x01\x02\x03\x04\x05\x06";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut rgb = Vec::new();
        for i in 0..4 * 3 * 3 {
            rgb.push((i * 37 % 256) as u8);
        }
        let bytes = encode_rgb(&rgb, 4, 3);
        let t = decode_ppm(&bytes).unwrap();
        let back = encode_ppm(&t).unwrap();
        assert_eq!(bytes, back);
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1\n255").is_err());
    }
}
