//! Binary PGM (`P5`) with one byte per pixel.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Largest width or height accepted by the decoder.
pub const MAX_SIDE: usize = 1 << 16;

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .filter(|&v| v <= MAX_SIDE)
                .ok_or_else(|| Error::format(start as u64, format!("{what} too large")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        Ok(value)
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray8> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "bad magic, expected \"P5\""));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(maxval_at as u64, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(h.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => h.pos += 1,
        _ => return Err(Error::format(h.pos as u64, "missing whitespace after maxval")),
    }
    let n = width * height;
    let available = bytes.len() - h.pos;
    if available != n {
        return Err(Error::format(
            h.pos as u64,
            format!("raster length mismatch: {width}x{height} needs {n} bytes, file has {available}"),
        ));
    }
    Ok(Gray8 {
        width,
        height,
        data: bytes[h.pos..].to_vec(),
    })
}

pub fn write_pgm(img: &Gray8, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<Gray8> {
    decode_pgm(&read_file(path)?).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
