//! Binary PGM ("P5") reading and writing, maxval 255 only.
//!
//! Parse errors carry the byte offset of the problem. The writer emits the
//! canonical header `P5\n<w> <h>\n255\n`.

use std::path::Path;

use crate::error::{KgtError, Result};
use crate::numerics::Tensor;

/// 8-bit grayscale image. File domain is 0..=255; the compute domain maps
/// sample `s` to `s/255` in [0,1].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        if samples.len() != width * height {
            return Err(KgtError::Dim {
                context: "GrayImage",
                detail: format!("{}x{} needs {} samples, got {}", width, height, width * height, samples.len()),
            });
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    /// `[1, H, W]` tensor with samples mapped to `s/255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[1, self.height, self.width],
            self.samples.iter().map(|&s| s as f32 / 255.0).collect(),
        )
        .expect("sample count checked at construction")
    }

    /// Quantize a `[1, H, W]` tensor back to 8 bits, clamping to [0,1].
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(KgtError::Dim {
                context: "GrayImage::from_tensor",
                detail: format!("expected [1,H,W], got {:?}", s),
            });
        }
        let samples = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(s[2], s[1], samples)
    }
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(KgtError::Pgm {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err(format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse::<usize>()
            .map_err(|_| KgtError::Pgm {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parse a binary PGM byte stream.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut s = Scanner { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return s.err("bad magic, expected \"P5\"");
    }
    s.pos = 2;
    let width = s.read_number("width")?;
    let height = s.read_number("height")?;
    if width == 0 || height == 0 {
        return s.err(format!("degenerate image {width}x{height}"));
    }
    let maxval_at = {
        s.skip_separators();
        s.pos
    };
    let maxval = s.read_number("maxval")?;
    if maxval != 255 {
        return Err(KgtError::Pgm {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}, only 255"),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if s.pos >= bytes.len() || !bytes[s.pos].is_ascii_whitespace() {
        return s.err("expected single whitespace before payload");
    }
    s.pos += 1;
    let need = width * height;
    let have = bytes.len() - s.pos;
    if have < need {
        return Err(KgtError::Pgm {
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes, have {have}"),
        });
    }
    GrayImage::new(width, height, bytes[s.pos..s.pos + need].to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pgm(&std::fs::read(path)?)
}

/// Canonical P5 encoding of an image.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_lossless() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let parsed = parse_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(parsed, img);
    }

    #[test]
    fn two_by_two_payload_bytes_are_exact() {
        let img = GrayImage::new(2, 2, vec![0, 128, 255, 64]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x80, 0xFF, 0x40]);
    }

    #[test]
    fn comment_headers_parse_identically() {
        let plain = b"P5\n2 2\n255\n\x00\x01\x02\x03".to_vec();
        let commented = b"P5\n# a comment line\n2 2\n# another\n255\n\x00\x01\x02\x03".to_vec();
        assert_eq!(parse_pgm(&plain).unwrap(), parse_pgm(&commented).unwrap());
    }

    #[test]
    fn error_taxonomy_with_offsets() {
        let bad_magic = parse_pgm(b"P6\n2 2\n255\n0000").unwrap_err();
        match bad_magic {
            KgtError::Pgm { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }

        let bad_maxval = parse_pgm(b"P5\n2 2\n65535\n\x00\x00\x00\x00").unwrap_err();
        match bad_maxval {
            KgtError::Pgm { offset, msg } => {
                assert_eq!(offset, 7);
                assert!(msg.contains("65535"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let truncated = parse_pgm(b"P5\n4 4\n255\n\x00\x01").unwrap_err();
        match truncated {
            KgtError::Pgm { msg, .. } => assert!(msg.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_conversion_clamps_and_quantizes() {
        let t = Tensor::new(&[1, 1, 4], vec![-0.5f32, 0.0, 0.5, 1.7]).unwrap();
        let img = GrayImage::from_tensor(&t).unwrap();
        assert_eq!(img.samples, vec![0, 0, 128, 255]);
        let back = img.to_tensor();
        assert_eq!(back.shape(), &[1, 1, 4]);
        assert!((back.data()[2] - 128.0 / 255.0).abs() < 1e-7);
    }
}
